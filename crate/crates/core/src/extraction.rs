//! Age-demographic entity extraction.
//!
//! The rule-based extractor runs four regex families over abstract or
//! summary text, collects matches in document order, and normalises the
//! surface forms. A generative extractor is also provided: it prompts a
//! chat-completion endpoint and keeps only lines that appear verbatim in
//! the source text, so the model cannot inject spans that were never there.
//!
//! Extracted spans can be parsed into numeric age ranges and classified
//! into the three cohort labels used throughout the pipeline.

use std::collections::HashSet;
use std::sync::LazyLock;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::AgeGroup;

/// Where an entity set came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    RuleBased,
    Generative,
    GoldAnnotation,
}

/// An ordered, de-duplicated set of normalised entity strings.
///
/// Order reflects first occurrence in the source document; equality of
/// membership is what scoring cares about, so `contains` is O(1).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "EntitySetRepr")]
pub struct EntitySet {
    entities: Vec<String>,
    #[serde(skip)]
    index: HashSet<String>,
    pub provenance: Provenance,
}

/// Wire form of [`EntitySet`]; conversion rebuilds the membership index.
#[derive(Deserialize)]
struct EntitySetRepr {
    entities: Vec<String>,
    provenance: Provenance,
}

impl From<EntitySetRepr> for EntitySet {
    fn from(repr: EntitySetRepr) -> Self {
        EntitySet::new(repr.entities, repr.provenance)
    }
}

impl PartialEq for EntitySet {
    fn eq(&self, other: &Self) -> bool {
        self.entities == other.entities && self.provenance == other.provenance
    }
}

impl EntitySet {
    /// Builds a set from already-normalised strings, dropping duplicates
    /// and empties while preserving first-occurrence order.
    pub fn new(entities: Vec<String>, provenance: Provenance) -> Self {
        let mut set = EntitySet {
            entities: Vec::with_capacity(entities.len()),
            index: HashSet::with_capacity(entities.len()),
            provenance,
        };
        for e in entities {
            set.push(e);
        }
        set
    }

    /// Normalises each raw string first, then builds the set.
    pub fn from_raw<I, S>(raw: I, provenance: Provenance) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Self::new(
            raw.into_iter()
                .map(|s| normalize_entity(s.as_ref()))
                .collect(),
            provenance,
        )
    }

    fn push(&mut self, entity: String) {
        if !entity.is_empty() && self.index.insert(entity.clone()) {
            self.entities.push(entity);
        }
    }

    pub fn contains(&self, entity: &str) -> bool {
        self.index.contains(entity)
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.entities.iter().map(String::as_str)
    }

    pub fn as_slice(&self) -> &[String] {
        &self.entities
    }
}

/// A numeric age range parsed from an entity span, in years.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgeSpan {
    pub low_years: f64,
    pub high_years: f64,
    /// The entity text the bounds were parsed from.
    pub raw_text: String,
}

impl AgeSpan {
    /// Builds a span, reordering bounds so `low_years <= high_years`.
    pub fn new(a: f64, b: f64, raw_text: impl Into<String>) -> Self {
        AgeSpan {
            low_years: a.min(b),
            high_years: a.max(b),
            raw_text: raw_text.into(),
        }
    }

    pub fn midpoint(&self) -> f64 {
        (self.low_years + self.high_years) / 2.0
    }
}

#[derive(Debug, Error)]
pub enum ExtractionError {
    #[error("generative request failed: {0}")]
    Request(String),
    #[error("generative endpoint returned status {0}")]
    Status(u16),
    #[error("malformed completion payload: {0}")]
    MalformedResponse(String),
}

// Year expressions such as "45 years old", "30-50 years", "12 yrs of age".
// The leading number must not directly continue a longer number, which the
// matcher enforces separately since the engine has no look-behind.
static YEARS_PATTERN: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)(\d{1,3})\s*(?:(?:-|–|to)\s*(\d{1,3}))?\s*(?:years?|yrs?)\s*(?:old|of age)?")
        .expect("static pattern")
});

// "aged 40", "age 40 to 65", "aged 40-65".
static AGED_PATTERN: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)aged?\s*(\d{1,3})(?:\s*(?:to|-|–)\s*(\d{1,3}))?").expect("static pattern")
});

// Infant expressions: "6 month-old", "6 month old", "12 mo old".
static MONTHS_PATTERN: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)(\d{1,2})\s*(?:month[- ]old|mo old)").expect("static pattern")
});

// "age of 20 to 40", "aged of 60-85": the explicit-range family.
static AGE_OF_RANGE_PATTERN: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)(?:age|aged)\s*(?:of\s*)?(\d{1,3})\s*(?:to|-|–)\s*(\d{1,3})")
        .expect("static pattern")
});

/// Finds all matches of `re` in `text` whose first character is not
/// preceded by an ASCII digit. This emulates a `(?<!\d)` guard, which the
/// regex engine does not support.
fn find_without_digit_prefix<'t>(re: &Regex, text: &'t str) -> Vec<regex::Match<'t>> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut at = 0;
    while let Some(m) = re.find_at(text, at) {
        let preceded = m.start() > 0 && bytes[m.start() - 1].is_ascii_digit();
        if preceded {
            // Skip just past the offending first digit and retry so later
            // non-prefixed occurrences are still found.
            at = m.start() + 1;
        } else {
            out.push(m);
            at = if m.end() > m.start() {
                m.end()
            } else {
                m.end() + 1
            };
        }
        if at > text.len() {
            break;
        }
    }
    out
}

/// Extracts age-demographic entity mentions from `text` with the four
/// rule families, in document order, normalised and de-duplicated.
pub fn extract_rule_based(text: &str) -> EntitySet {
    let mut spans: Vec<(usize, usize)> = Vec::new();
    for m in find_without_digit_prefix(&YEARS_PATTERN, text) {
        spans.push((m.start(), m.end()));
    }
    for re in [&*AGED_PATTERN, &*MONTHS_PATTERN, &*AGE_OF_RANGE_PATTERN] {
        for m in re.find_iter(text) {
            spans.push((m.start(), m.end()));
        }
    }
    spans.sort_unstable();
    spans.dedup();

    EntitySet::from_raw(
        spans.iter().map(|&(s, e)| &text[s..e]),
        Provenance::RuleBased,
    )
}

/// Canonical form used for all entity comparison: lowercase, single spaces,
/// no trailing punctuation.
pub fn normalize_entity(raw: &str) -> String {
    let lower = raw.to_lowercase();
    let collapsed = lower.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed
        .trim_end_matches(['.', ',', ';', ':', '!', '?'])
        .trim()
        .to_string()
}

/// Parses a numeric age range out of an already-normalised entity string.
///
/// Month-based spans are converted to fractional years. Returns `None`
/// when the string carries no parsable number.
pub fn parse_age_span(entity: &str) -> Option<AgeSpan> {
    if let Some(c) = MONTHS_PATTERN.captures(entity) {
        let months: f64 = c[1].parse().ok()?;
        let years = months / 12.0;
        return Some(AgeSpan::new(years, years, entity));
    }
    let years_match = find_without_digit_prefix(&YEARS_PATTERN, entity)
        .first()
        .map(|m| (&*YEARS_PATTERN, m.as_str().to_string()));
    let candidate = years_match.or_else(|| {
        [&*AGED_PATTERN, &*AGE_OF_RANGE_PATTERN]
            .into_iter()
            .find_map(|re| re.find(entity).map(|m| (re, m.as_str().to_string())))
    });
    let (re, matched) = candidate?;
    let c = re.captures(&matched)?;
    let low: f64 = c[1].parse().ok()?;
    let high: f64 = c
        .get(2)
        .and_then(|g| g.as_str().parse().ok())
        .unwrap_or(low);
    Some(AgeSpan::new(low, high, entity))
}

/// The gold entity set for a review: the annotated set when present,
/// otherwise derived from the gold abstract by rule-based extraction.
pub fn resolve_gold(review: &crate::corpus::Review) -> EntitySet {
    match &review.gold_entities {
        Some(set) => set.clone(),
        None => extract_rule_based(&review.gold_abstract),
    }
}

/// Maps an age span to its cohort by midpoint: under 18 is childhood,
/// under 60 adulthood, otherwise older adult.
pub fn classify_age_group(span: &AgeSpan) -> AgeGroup {
    let mid = span.midpoint();
    if mid < 18.0 {
        AgeGroup::Childhood
    } else if mid < 60.0 {
        AgeGroup::Adulthood
    } else {
        AgeGroup::OlderAdult
    }
}

/// Abstraction over a chat-completion backend used for generative
/// extraction. Implementations must be safe to call from worker threads.
pub trait GenerativeExtractor: Send + Sync {
    /// Sends one system + user prompt pair and returns the raw completion
    /// text.
    fn complete(&self, system_prompt: &str, user_prompt: &str) -> Result<String, ExtractionError>;
}

const SYSTEM_PROMPT: &str = "You are a helpful assistant. Given the abstract, extract all age related demographic entities.\nYou should extract entities related to age.\nYour job is to extract these entities only, do not add to or subtract from the provided text.";

/// Result of a generative extraction pass.
#[derive(Debug, Clone)]
pub struct GenerativeExtraction {
    pub entities: EntitySet,
    /// Completion items that were not substrings of the source text —
    /// extractor hallucinations, reported for diagnostics. They are kept
    /// in `entities` only when extraction ran with `keep_unsupported`.
    pub unsupported: Vec<String>,
}

/// Extracts entities by prompting `client` with the fixed extraction
/// instructions. Items the model returns that are not substrings of the
/// source text are dropped and reported as warnings.
pub fn extract_generative(
    client: &dyn GenerativeExtractor,
    text: &str,
) -> Result<GenerativeExtraction, ExtractionError> {
    extract_generative_with(client, text, false)
}

/// As [`extract_generative`], with control over unsupported items:
/// when `keep_unsupported` is set, completion items that are not
/// substrings of the source are retained in the entity set instead of
/// dropped (they are still listed in `unsupported`).
///
/// The completion is parsed as a newline- or comma-separated entity
/// list; list markers ("- ", "1.", "*") are stripped and every item is
/// normalised before the substring check against the normalised source.
pub fn extract_generative_with(
    client: &dyn GenerativeExtractor,
    text: &str,
    keep_unsupported: bool,
) -> Result<GenerativeExtraction, ExtractionError> {
    let user_prompt = format!("Here is the abstract set: \n{text}");
    let completion = client.complete(SYSTEM_PROMPT, &user_prompt)?;

    let haystack = normalize_entity(text);
    let mut kept = Vec::new();
    let mut unsupported = Vec::new();
    for line in completion.lines() {
        for item in line.split(',') {
            let stripped = item
                .trim()
                .trim_start_matches(['-', '*', '•'])
                .trim_start_matches(|c: char| c.is_ascii_digit())
                .trim_start_matches(['.', ')', ':'])
                .trim();
            let entity = normalize_entity(stripped);
            if entity.is_empty() {
                continue;
            }
            if haystack.contains(&entity) {
                kept.push(entity);
            } else {
                if keep_unsupported {
                    kept.push(entity.clone());
                }
                unsupported.push(entity);
            }
        }
    }
    Ok(GenerativeExtraction {
        entities: EntitySet::new(kept, Provenance::Generative),
        unsupported,
    })
}

/// Chat-completion client over HTTP, OpenAI-style wire format.
///
/// Sends `{"model": ..., "messages": [{role, content}, ...]}` and reads
/// the first choice's message content. The bearer token is taken from the
/// `GEN_API_KEY` environment variable when present.
pub struct HttpGenerativeClient {
    endpoint: String,
    model: String,
    client: reqwest::blocking::Client,
}

impl HttpGenerativeClient {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        HttpGenerativeClient {
            endpoint: endpoint.into(),
            model: model.into(),
            client: reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(120))
                .build()
                .expect("default TLS backend"),
        }
    }
}

impl GenerativeExtractor for HttpGenerativeClient {
    fn complete(&self, system_prompt: &str, user_prompt: &str) -> Result<String, ExtractionError> {
        let body = serde_json::json!({
            "model": self.model,
            "messages": [
                {"role": "system", "content": system_prompt},
                {"role": "user", "content": user_prompt},
            ],
        });
        let mut req = self.client.post(&self.endpoint).json(&body);
        if let Ok(key) = std::env::var("GEN_API_KEY") {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .map_err(|e| ExtractionError::Request(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(ExtractionError::Status(status.as_u16()));
        }
        let payload: serde_json::Value = resp
            .json()
            .map_err(|e| ExtractionError::MalformedResponse(e.to_string()))?;
        payload["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| {
                ExtractionError::MalformedResponse("missing choices[0].message.content".to_string())
            })
    }
}
