//! Entity matching: embedding providers, cosine similarity, and the
//! partition of gold/generated entities into exact matches, semantic
//! matches, omissions, hallucinations, and supported extras.
//!
//! Two providers are available: a deterministic built-in character-trigram
//! embedder (hermetic, used by default and in all tests) and a remote
//! embedding service client. Pairwise similarities can be persisted to a
//! CSV cache so interrupted remote runs resume without recomputation.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extraction::EntitySet;

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("embedding dimensions differ: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("embedding request failed: {0}")]
    Transport(String),
    #[error("embedding endpoint returned status {0}")]
    Status(u16),
    #[error("malformed embedding payload: {0}")]
    MalformedResponse(String),
    #[error("embedding batch returned {got} vectors for {expected} inputs")]
    BatchShape { expected: usize, got: usize },
    #[error("cannot access similarity cache: {0}")]
    Cache(String),
}

/// A fixed-dimension real vector produced by an embedding provider.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    components: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(components: Vec<f64>) -> Self {
        EmbeddingVector { components }
    }

    pub fn dimension(&self) -> usize {
        self.components.len()
    }

    pub fn components(&self) -> &[f64] {
        &self.components
    }

    pub fn is_zero(&self) -> bool {
        self.components.iter().all(|&c| c == 0.0)
    }
}

/// Source of embedding vectors. All vectors from one provider share a
/// dimension, and only the empty string may embed to the zero vector.
pub trait EmbeddingProvider: Send + Sync {
    fn embed(&self, text: &str) -> Result<EmbeddingVector, MatchError>;

    /// Embeds many texts at once; remote implementations override this
    /// with a single request.
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, MatchError> {
        texts.iter().map(|t| self.embed(t)).collect()
    }
}

/// Number of hash buckets in the built-in trigram embedding.
pub const TRIGRAM_DIMENSION: usize = 1024;

/// Deterministic, dependency-free embedder: the text is lowercased,
/// padded with `^` and `$` boundary markers, split into character
/// trigrams, and each trigram's 64-bit FNV-1a hash selects one of 1024
/// buckets in a term-frequency vector.
#[derive(Debug, Clone, Copy, Default)]
pub struct HashedTrigramEmbedder;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

impl EmbeddingProvider for HashedTrigramEmbedder {
    fn embed(&self, text: &str) -> Result<EmbeddingVector, MatchError> {
        let mut components = vec![0.0; TRIGRAM_DIMENSION];
        let lowered = text.to_lowercase();
        if !lowered.is_empty() {
            let padded: Vec<char> = std::iter::once('^')
                .chain(lowered.chars())
                .chain(std::iter::once('$'))
                .collect();
            let mut buf = String::new();
            for window in padded.windows(3) {
                buf.clear();
                buf.extend(window);
                let bucket = (fnv1a(buf.as_bytes()) % TRIGRAM_DIMENSION as u64) as usize;
                components[bucket] += 1.0;
            }
        }
        Ok(EmbeddingVector::new(components))
    }
}

/// Client for a remote embedding service: POSTs a JSON array of strings
/// and expects a JSON array of equal-length number arrays back. The model
/// identifier travels in the `X-Embedding-Model` header and the bearer
/// token is read from `EMBED_API_KEY` when set.
pub struct RemoteEmbeddingClient {
    endpoint: String,
    model: String,
    client: reqwest::blocking::Client,
}

impl RemoteEmbeddingClient {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        RemoteEmbeddingClient {
            endpoint: endpoint.into(),
            model: model.into(),
            client: reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(60))
                .build()
                .expect("default TLS backend"),
        }
    }
}

impl EmbeddingProvider for RemoteEmbeddingClient {
    fn embed(&self, text: &str) -> Result<EmbeddingVector, MatchError> {
        let mut batch = self.embed_batch(&[text])?;
        Ok(batch.pop().expect("batch shape validated"))
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, MatchError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let mut req = self
            .client
            .post(&self.endpoint)
            .header("X-Embedding-Model", &self.model)
            .json(&texts);
        if let Ok(key) = std::env::var("EMBED_API_KEY") {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .map_err(|e| MatchError::Transport(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(MatchError::Status(status.as_u16()));
        }
        let rows: Vec<Vec<f64>> = resp
            .json()
            .map_err(|e| MatchError::MalformedResponse(e.to_string()))?;
        if rows.len() != texts.len() {
            return Err(MatchError::BatchShape {
                expected: texts.len(),
                got: rows.len(),
            });
        }
        let dim = rows[0].len();
        for row in &rows {
            if row.len() != dim {
                return Err(MatchError::DimensionMismatch {
                    left: dim,
                    right: row.len(),
                });
            }
        }
        Ok(rows.into_iter().map(EmbeddingVector::new).collect())
    }
}

/// Cosine similarity of two equal-dimension vectors; defined as 0 when
/// either vector is zero.
pub fn cosine(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64, MatchError> {
    if u.dimension() != v.dimension() {
        return Err(MatchError::DimensionMismatch {
            left: u.dimension(),
            right: v.dimension(),
        });
    }
    let mut dot = 0.0;
    let mut nu = 0.0;
    let mut nv = 0.0;
    for (a, b) in u.components().iter().zip(v.components()) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (nu.sqrt() * nv.sqrt())).clamp(-1.0, 1.0))
}

/// Persistent store of pairwise similarities, keyed order-insensitively.
/// Serialised as CSV (`entity_a,entity_b,similarity`) sorted by key, so
/// saved caches are byte-stable and diff cleanly.
#[derive(Debug, Clone, Default)]
pub struct SimilarityCache {
    map: BTreeMap<(String, String), f64>,
}

fn pair_key(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

impl SimilarityCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        self.map.get(&pair_key(a, b)).copied()
    }

    pub fn put(&mut self, a: &str, b: &str, similarity: f64) {
        self.map.insert(pair_key(a, b), similarity);
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Merges every entry of `other` into `self` (later values win).
    pub fn absorb(&mut self, other: SimilarityCache) {
        self.map.extend(other.map);
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, MatchError> {
        let mut reader =
            csv::Reader::from_path(path.as_ref()).map_err(|e| MatchError::Cache(e.to_string()))?;
        let mut map = BTreeMap::new();
        for record in reader.deserialize::<(String, String, f64)>() {
            let (a, b, sim) = record.map_err(|e| MatchError::Cache(e.to_string()))?;
            map.insert(pair_key(&a, &b), sim);
        }
        Ok(SimilarityCache { map })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), MatchError> {
        let mut writer =
            csv::Writer::from_path(path.as_ref()).map_err(|e| MatchError::Cache(e.to_string()))?;
        writer
            .write_record(["entity_a", "entity_b", "similarity"])
            .map_err(|e| MatchError::Cache(e.to_string()))?;
        for ((a, b), sim) in &self.map {
            writer
                .serialize((a, b, sim))
                .map_err(|e| MatchError::Cache(e.to_string()))?;
        }
        writer
            .flush()
            .map_err(|e| MatchError::Cache(e.to_string()))?;
        Ok(())
    }
}

/// Computes pairwise similarity between entity strings. Implementations
/// may batch, memoise, or cache; results must be deterministic for a
/// fixed provider.
pub trait SimilarityScorer: Send {
    /// Hint that similarities among `texts` are about to be requested;
    /// batching implementations embed them in one round-trip.
    fn prepare(&mut self, _texts: &[&str]) -> Result<(), MatchError> {
        Ok(())
    }

    fn similarity(&mut self, a: &str, b: &str) -> Result<f64, MatchError>;
}

/// [`SimilarityScorer`] over an [`EmbeddingProvider`], with memoised
/// vectors and a similarity cache that can be pre-loaded from disk.
pub struct EmbeddingScorer<'p> {
    provider: &'p dyn EmbeddingProvider,
    vectors: HashMap<String, EmbeddingVector>,
    cache: SimilarityCache,
}

impl<'p> EmbeddingScorer<'p> {
    pub fn new(provider: &'p dyn EmbeddingProvider) -> Self {
        Self::with_cache(provider, SimilarityCache::new())
    }

    pub fn with_cache(provider: &'p dyn EmbeddingProvider, cache: SimilarityCache) -> Self {
        EmbeddingScorer {
            provider,
            vectors: HashMap::new(),
            cache,
        }
    }

    pub fn cache(&self) -> &SimilarityCache {
        &self.cache
    }

    pub fn into_cache(self) -> SimilarityCache {
        self.cache
    }

    fn vector(&mut self, text: &str) -> Result<&EmbeddingVector, MatchError> {
        if !self.vectors.contains_key(text) {
            let v = self.provider.embed(text)?;
            self.vectors.insert(text.to_string(), v);
        }
        Ok(&self.vectors[text])
    }
}

impl SimilarityScorer for EmbeddingScorer<'_> {
    fn prepare(&mut self, texts: &[&str]) -> Result<(), MatchError> {
        // When every pair is already cached the embeddings are never
        // consulted, which is what makes interrupted remote runs cheap to
        // resume.
        let all_cached = texts.iter().enumerate().all(|(i, a)| {
            texts[i + 1..]
                .iter()
                .all(|b| self.cache.get(a, b).is_some())
        });
        if all_cached {
            return Ok(());
        }
        let missing: Vec<&str> = texts
            .iter()
            .copied()
            .filter(|t| !self.vectors.contains_key(*t))
            .collect();
        if missing.is_empty() {
            return Ok(());
        }
        let embedded = self.provider.embed_batch(&missing)?;
        if embedded.len() != missing.len() {
            return Err(MatchError::BatchShape {
                expected: missing.len(),
                got: embedded.len(),
            });
        }
        for (text, vector) in missing.into_iter().zip(embedded) {
            self.vectors.insert(text.to_string(), vector);
        }
        Ok(())
    }

    fn similarity(&mut self, a: &str, b: &str) -> Result<f64, MatchError> {
        if let Some(sim) = self.cache.get(a, b) {
            return Ok(sim);
        }
        let sim = {
            let va = self.vector(a)?.clone();
            let vb = self.vector(b)?;
            cosine(&va, vb)?
        };
        self.cache.put(a, b, sim);
        Ok(sim)
    }
}

/// One semantically matched gold/generated pair with its similarity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticMatch {
    pub gold: String,
    pub generated: String,
    pub similarity: f64,
}

/// Per-review partition of entities produced by [`match_entities`].
///
/// Gold entities land in exactly one of `exact_matches`, the gold side of
/// `semantic_matches`, or `omissions`. Every generated entity lands in
/// `exact_matches`, the generated side of `semantic_matches`,
/// `hallucinations`, or `supported_extras`; the first two may overlap,
/// since pairing is per-gold and non-consuming (an exactly matched
/// entity can also be another gold entity's closest candidate).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    /// Set by the pipeline; empty when matching standalone sets.
    pub review_id: String,
    pub exact_matches: Vec<String>,
    pub semantic_matches: Vec<SemanticMatch>,
    pub omissions: Vec<String>,
    pub hallucinations: Vec<String>,
    /// Generated entities similar to the gold set that were not chosen as
    /// a pair target. They count as neither matched nor hallucinated.
    pub supported_extras: Vec<String>,
    pub gold_total: usize,
    pub generated_total: usize,
    /// `(match_threshold, hallucination_threshold)`.
    pub thresholds_used: (f64, f64),
}

impl MatchReport {
    /// Gold entities found exactly or semantically.
    pub fn matched_gold_count(&self) -> usize {
        self.exact_matches.len() + self.semantic_matches.len()
    }
}

/// Partitions `gold` and `generated` entities with the default
/// provider-backed scorer. Thresholds must lie in (0, 1].
///
/// Exact matches are taken first (string equality after normalisation).
/// Each remaining gold entity is paired with the most similar generated
/// entity when that similarity reaches `match_threshold` (ties broken by
/// first occurrence in the generated list); the rest are omissions.
/// Generated entities outside all pairs whose best similarity to the
/// gold set falls below `hallucination_threshold` are hallucinations;
/// those at or above it are supported extras.
pub fn match_entities(
    gold: &EntitySet,
    generated: &EntitySet,
    provider: &dyn EmbeddingProvider,
    match_threshold: f64,
    hallucination_threshold: f64,
) -> Result<MatchReport, MatchError> {
    let mut scorer = EmbeddingScorer::new(provider);
    match_entities_with(
        gold,
        generated,
        &mut scorer,
        match_threshold,
        hallucination_threshold,
    )
}

/// As [`match_entities`], but through a caller-supplied scorer so
/// similarity caches survive across reviews.
pub fn match_entities_with(
    gold: &EntitySet,
    generated: &EntitySet,
    scorer: &mut dyn SimilarityScorer,
    match_threshold: f64,
    hallucination_threshold: f64,
) -> Result<MatchReport, MatchError> {
    debug_assert!(match_threshold > 0.0 && match_threshold <= 1.0);
    debug_assert!(hallucination_threshold > 0.0 && hallucination_threshold <= 1.0);

    let mut exact_matches = Vec::new();
    let mut remaining_gold = Vec::new();
    for g in gold.iter() {
        if generated.contains(g) {
            exact_matches.push(g.to_string());
        } else {
            remaining_gold.push(g);
        }
    }
    let exact_index: HashSet<&str> = exact_matches.iter().map(String::as_str).collect();

    let all_texts: Vec<&str> = gold.iter().chain(generated.iter()).collect();
    scorer.prepare(&all_texts)?;

    let generated_list: Vec<&str> = generated.iter().collect();
    let mut semantic_matches = Vec::new();
    let mut omissions = Vec::new();
    let mut pair_targets: HashSet<&str> = HashSet::new();
    for g in remaining_gold {
        let mut best: Option<(f64, &str)> = None;
        for &cand in &generated_list {
            let sim = scorer.similarity(g, cand)?;
            // strict > keeps the first occurrence on ties
            if best.is_none_or(|(best_sim, _)| sim > best_sim) {
                best = Some((sim, cand));
            }
        }
        match best {
            Some((sim, cand)) if sim >= match_threshold => {
                pair_targets.insert(cand);
                semantic_matches.push(SemanticMatch {
                    gold: g.to_string(),
                    generated: cand.to_string(),
                    similarity: sim,
                });
            }
            _ => omissions.push(g.to_string()),
        }
    }

    let mut hallucinations = Vec::new();
    let mut supported_extras = Vec::new();
    for &cand in &generated_list {
        if exact_index.contains(cand) || pair_targets.contains(cand) {
            continue;
        }
        let mut best = f64::NEG_INFINITY;
        for g in gold.iter() {
            best = best.max(scorer.similarity(g, cand)?);
        }
        if best >= hallucination_threshold {
            supported_extras.push(cand.to_string());
        } else {
            hallucinations.push(cand.to_string());
        }
    }

    Ok(MatchReport {
        review_id: String::new(),
        exact_matches,
        semantic_matches,
        omissions,
        hallucinations,
        supported_extras,
        gold_total: gold.len(),
        generated_total: generated.len(),
        thresholds_used: (match_threshold, hallucination_threshold),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extraction::Provenance;
    use std::io::{Read, Write};
    use std::net::TcpListener;
    use std::thread;

    fn set(entities: &[&str]) -> EntitySet {
        EntitySet::from_raw(entities.to_vec(), Provenance::RuleBased)
    }

    fn builtin_sim(a: &str, b: &str) -> f64 {
        let e = HashedTrigramEmbedder;
        cosine(&e.embed(a).unwrap(), &e.embed(b).unwrap()).unwrap()
    }

    #[test]
    fn embed_empty_string_is_zero_vector() {
        let v = HashedTrigramEmbedder.embed("").unwrap();
        assert_eq!(v.dimension(), TRIGRAM_DIMENSION);
        assert!(v.is_zero());
    }

    #[test]
    fn embed_is_deterministic() {
        let e = HashedTrigramEmbedder;
        assert_eq!(
            e.embed("older adults").unwrap(),
            e.embed("older adults").unwrap()
        );
    }

    #[test]
    fn embed_abc_has_three_trigram_buckets() {
        // "^abc$" yields trigrams ^ab, abc, bc$ — three distinct buckets
        // (no collision among them), components summing to 3.
        let v = HashedTrigramEmbedder.embed("abc").unwrap();
        let sum: f64 = v.components().iter().sum();
        let nonzero = v.components().iter().filter(|&&c| c != 0.0).count();
        assert_eq!(sum, 3.0);
        assert_eq!(nonzero, 3);
    }

    #[test]
    fn embed_lowercases_before_hashing() {
        let e = HashedTrigramEmbedder;
        assert_eq!(
            e.embed("OLDER Adults").unwrap(),
            e.embed("older adults").unwrap()
        );
    }

    #[test]
    fn cosine_identities() {
        let e = HashedTrigramEmbedder;
        let v = e.embed("aged 40 to 65").unwrap();
        assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-12);

        let zero = e.embed("").unwrap();
        assert_eq!(cosine(&v, &zero).unwrap(), 0.0);

        let a = EmbeddingVector::new(vec![1.0, 0.0]);
        let b = EmbeddingVector::new(vec![0.0, 1.0]);
        assert_eq!(cosine(&a, &b).unwrap(), 0.0);

        let short = EmbeddingVector::new(vec![1.0]);
        assert!(matches!(
            cosine(&a, &short),
            Err(MatchError::DimensionMismatch { left: 2, right: 1 })
        ));
    }

    #[test]
    fn trigram_cosines_match_frozen_oracle() {
        // Values computed by an independent high-precision implementation
        // of the same pipeline (lowercase, ^/$ padding, FNV-1a mod 1024).
        let oracle: &[(&str, &str, f64)] = &[
            ("older adult", "older adults", 0.8703882797784892),
            ("older adults", "prisoners", 0.09622504486493763),
            ("young adults", "adults", 0.5892556509887896),
            ("adults", "older adults", 0.5892556509887896),
            ("aged 40 to 65", "aged 40-65", 0.6139406135149205),
            ("children", "childhood", 0.5892556509887896),
            ("elderly", "older adults", 0.2182178902359924),
            ("older adult", "elderly adults", 0.48349377841522817),
            ("45 years old", "45 years", 0.7144345083117603),
            ("adult", "adults", 0.7302967433402214),
            ("6 month-old", "aged 40 to 65", 0.0),
            ("infants", "6 month-old", 0.0),
        ];
        for (a, b, expected) in oracle {
            let got = builtin_sim(a, b);
            assert!(
                (got - expected).abs() < 1e-12,
                "cos({a:?}, {b:?}) = {got}, expected {expected}"
            );
        }
    }

    #[test]
    fn singular_plural_pair_clears_default_threshold() {
        assert!(builtin_sim("older adult", "older adults") >= 0.7);
        assert!(builtin_sim("older adults", "prisoners") < 0.7);
    }

    #[test]
    fn match_identity_never_omits_or_hallucinates() {
        let g = set(&["aged 40 to 65", "older adults", "45 years old"]);
        let report = match_entities(&g, &g, &HashedTrigramEmbedder, 0.7, 0.7).unwrap();
        assert_eq!(report.exact_matches.len(), 3);
        assert!(report.semantic_matches.is_empty());
        assert!(report.omissions.is_empty());
        assert!(report.hallucinations.is_empty());
        assert!(report.supported_extras.is_empty());
    }

    #[test]
    fn unrelated_entities_partition_into_omission_and_hallucination() {
        let gold = set(&["older adults"]);
        let generated = set(&["prisoners"]);
        let report = match_entities(&gold, &generated, &HashedTrigramEmbedder, 0.7, 0.7).unwrap();
        assert!(report.exact_matches.is_empty());
        assert!(report.semantic_matches.is_empty());
        assert_eq!(report.omissions, vec!["older adults"]);
        assert_eq!(report.hallucinations, vec!["prisoners"]);
    }

    #[test]
    fn empty_generated_set_omits_everything() {
        let gold = set(&["a", "b"]);
        let generated = set(&[]);
        let report = match_entities(&gold, &generated, &HashedTrigramEmbedder, 0.7, 0.7).unwrap();
        assert_eq!(report.omissions, vec!["a", "b"]);
        assert!(report.hallucinations.is_empty());
        assert_eq!(report.matched_gold_count(), 0);
    }

    #[test]
    fn semantic_match_pairs_with_argmax() {
        // "older adult" (gold) has no exact twin but "older adults" is
        // 0.87-similar; "prisoners" stays a hallucination.
        let gold = set(&["older adult"]);
        let generated = set(&["prisoners", "older adults"]);
        let report = match_entities(&gold, &generated, &HashedTrigramEmbedder, 0.7, 0.7).unwrap();
        assert_eq!(report.semantic_matches.len(), 1);
        let m = &report.semantic_matches[0];
        assert_eq!(m.gold, "older adult");
        assert_eq!(m.generated, "older adults");
        assert!((m.similarity - 0.8703882797784892).abs() < 1e-12);
        assert!(report.omissions.is_empty());
        assert_eq!(report.hallucinations, vec!["prisoners"]);
    }

    #[test]
    fn supported_extras_are_neither_matched_nor_hallucinated() {
        // "adults" matches gold exactly; the leftover "adult" is
        // 0.73-similar to gold so it is not a hallucination, but no gold
        // entity remains for it to pair with.
        let gold = set(&["adults"]);
        let generated = set(&["adults", "adult"]);
        let report = match_entities(&gold, &generated, &HashedTrigramEmbedder, 0.7, 0.7).unwrap();
        assert_eq!(report.exact_matches, vec!["adults"]);
        assert!(report.hallucinations.is_empty());
        assert_eq!(report.supported_extras, vec!["adult"]);
    }

    #[test]
    fn partition_totality_over_gold() {
        let gold = set(&["older adult", "aged 40 to 65", "infants"]);
        let generated = set(&["older adults", "prisoners"]);
        let report = match_entities(&gold, &generated, &HashedTrigramEmbedder, 0.7, 0.7).unwrap();
        assert_eq!(
            report.gold_total,
            report.exact_matches.len() + report.semantic_matches.len() + report.omissions.len()
        );
        let mut covered: HashSet<&str> = report.exact_matches.iter().map(String::as_str).collect();
        covered.extend(report.semantic_matches.iter().map(|m| m.generated.as_str()));
        covered.extend(report.hallucinations.iter().map(String::as_str));
        covered.extend(report.supported_extras.iter().map(String::as_str));
        assert_eq!(report.generated_total, covered.len());
    }

    #[test]
    fn exact_match_can_double_as_semantic_target() {
        // both golds are closest to the single generated entity: one
        // matches exactly, and non-consuming pairing lets the other
        // pair semantically with the same string
        let gold = set(&["aged 40 to 65", "aged 40 to 64"]);
        let generated = set(&["aged 40 to 65"]);
        let report = match_entities(&gold, &generated, &HashedTrigramEmbedder, 0.7, 0.7).unwrap();
        assert_eq!(report.exact_matches, vec!["aged 40 to 65"]);
        assert_eq!(report.semantic_matches.len(), 1);
        assert_eq!(report.semantic_matches[0].gold, "aged 40 to 64");
        assert_eq!(report.semantic_matches[0].generated, "aged 40 to 65");
        assert!(report.omissions.is_empty());
        assert!(report.hallucinations.is_empty());
        assert!(report.supported_extras.is_empty());
        assert_eq!(report.matched_gold_count(), 2);
    }

    #[test]
    fn match_count_monotone_in_threshold() {
        let gold = set(&["older adult", "45 years old"]);
        let generated = set(&["older adults", "45 years"]);
        let mut last = usize::MAX;
        for threshold in [0.5, 0.7, 0.72, 0.9, 1.0] {
            let report =
                match_entities(&gold, &generated, &HashedTrigramEmbedder, threshold, 0.7).unwrap();
            let matched = report.matched_gold_count();
            assert!(
                matched <= last,
                "matches increased at threshold {threshold}"
            );
            last = matched;
        }
    }

    #[test]
    fn hallucination_count_monotone_in_threshold() {
        let gold = set(&["older adult"]);
        let generated = set(&["adults", "prisoners"]);
        let mut last = 0;
        for threshold in [0.05, 0.3, 0.7, 1.0] {
            let report =
                match_entities(&gold, &generated, &HashedTrigramEmbedder, 0.99, threshold).unwrap();
            let count = report.hallucinations.len();
            assert!(
                count >= last,
                "hallucinations decreased at threshold {threshold}"
            );
            last = count;
        }
    }

    #[test]
    fn cache_round_trips_through_csv() {
        let mut cache = SimilarityCache::new();
        cache.put("b", "a", 0.25);
        cache.put("x", "y", 0.7144345083117603);
        assert_eq!(cache.get("a", "b"), Some(0.25));
        assert_eq!(cache.get("y", "x"), Some(0.7144345083117603));

        let file = tempfile::NamedTempFile::new().unwrap();
        cache.save(file.path()).unwrap();
        let reloaded = SimilarityCache::load(file.path()).unwrap();
        assert_eq!(reloaded.len(), 2);
        assert_eq!(reloaded.get("x", "y"), Some(0.7144345083117603));
    }

    /// Counts embed calls to prove cache hits skip the provider.
    struct CountingProvider {
        inner: HashedTrigramEmbedder,
        calls: std::sync::atomic::AtomicUsize,
    }

    impl EmbeddingProvider for CountingProvider {
        fn embed(&self, text: &str) -> Result<EmbeddingVector, MatchError> {
            self.calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            self.inner.embed(text)
        }
    }

    #[test]
    fn warm_cache_bypasses_the_provider() {
        let gold = set(&["older adult"]);
        let generated = set(&["older adults"]);

        let provider = CountingProvider {
            inner: HashedTrigramEmbedder,
            calls: std::sync::atomic::AtomicUsize::new(0),
        };
        let mut scorer = EmbeddingScorer::new(&provider);
        let first = match_entities_with(&gold, &generated, &mut scorer, 0.7, 0.7).unwrap();
        let calls_after_first = provider.calls.load(std::sync::atomic::Ordering::SeqCst);
        assert!(calls_after_first > 0);

        let warm = scorer.into_cache();
        let mut cached_scorer = EmbeddingScorer::with_cache(&provider, warm);
        let second = match_entities_with(&gold, &generated, &mut cached_scorer, 0.7, 0.7).unwrap();
        assert_eq!(
            provider.calls.load(std::sync::atomic::Ordering::SeqCst),
            calls_after_first,
            "cached run must not call the provider"
        );
        assert_eq!(first.semantic_matches, second.semantic_matches);
    }

    /// Minimal one-shot HTTP stub: accepts a single request, captures it,
    /// and replies with the canned body.
    fn stub_server(body: &str) -> (String, thread::JoinHandle<String>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let response = format!(
            "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
            body.len(),
            body
        );
        let handle = thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            let mut captured = Vec::new();
            let mut buf = [0u8; 4096];
            loop {
                let n = stream.read(&mut buf).unwrap();
                captured.extend_from_slice(&buf[..n]);
                let text = String::from_utf8_lossy(&captured);
                if let Some(header_end) = text.find("\r\n\r\n") {
                    let content_length = text
                        .lines()
                        .find_map(|l| {
                            l.to_ascii_lowercase()
                                .strip_prefix("content-length:")
                                .map(|v| v.trim().parse::<usize>().unwrap())
                        })
                        .unwrap_or(0);
                    if captured.len() >= header_end + 4 + content_length {
                        break;
                    }
                }
                if n == 0 {
                    break;
                }
            }
            stream.write_all(response.as_bytes()).unwrap();
            String::from_utf8_lossy(&captured).into_owned()
        });
        (format!("http://{addr}/embed"), handle)
    }

    #[test]
    fn remote_client_round_trip() {
        let (endpoint, server) = stub_server("[[1.0, 0.0], [0.0, 2.0]]");
        let client = RemoteEmbeddingClient::new(endpoint, "test-model");
        let vectors = client.embed_batch(&["older adults", "prisoners"]).unwrap();
        assert_eq!(vectors.len(), 2);
        assert_eq!(vectors[0].components(), &[1.0, 0.0]);
        assert_eq!(vectors[1].dimension(), 2);

        let request = server.join().unwrap();
        assert!(request.contains("POST /embed"));
        assert!(request.contains("x-embedding-model: test-model"));
        assert!(request.contains(r#"["older adults","prisoners"]"#));
    }

    #[test]
    fn remote_client_rejects_ragged_batches() {
        let (endpoint, server) = stub_server("[[1.0, 0.0], [0.5]]");
        let client = RemoteEmbeddingClient::new(endpoint, "test-model");
        let err = client.embed_batch(&["a", "b"]).unwrap_err();
        assert!(matches!(
            err,
            MatchError::DimensionMismatch { left: 2, right: 1 }
        ));
        let _ = server.join();
    }

    #[test]
    fn remote_client_rejects_wrong_row_count() {
        let (endpoint, server) = stub_server("[[1.0, 0.0]]");
        let client = RemoteEmbeddingClient::new(endpoint, "test-model");
        let err = client.embed_batch(&["a", "b"]).unwrap_err();
        assert!(matches!(
            err,
            MatchError::BatchShape {
                expected: 2,
                got: 1
            }
        ));
        let _ = server.join();
    }

    #[test]
    fn remote_client_surfaces_http_errors() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            let mut buf = [0u8; 4096];
            let _ = stream.read(&mut buf).unwrap();
            stream
                .write_all(b"HTTP/1.1 503 Service Unavailable\r\nContent-Length: 0\r\nConnection: close\r\n\r\n")
                .unwrap();
        });
        let client = RemoteEmbeddingClient::new(format!("http://{addr}/embed"), "m");
        let err = client.embed_batch(&["a"]).unwrap_err();
        assert!(matches!(err, MatchError::Status(503)));
        let _ = server.join();
    }
}
