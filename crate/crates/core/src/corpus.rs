//! Corpus loading, validation, filtering, and persistence.
//!
//! A corpus is a JSONL file with one record per line, each tagged
//! `"kind": "review"` or `"kind": "summary"`. Reviews carry the gold
//! abstract (and optionally pre-annotated gold entities); summaries carry
//! generated text keyed by review, system, and prompt condition. Line
//! order never affects the loaded corpus: summaries may precede the
//! reviews they reference.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extraction::{EntitySet, Provenance};

/// The three-cohort age taxonomy every review is assigned to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgeGroup {
    Childhood,
    Adulthood,
    OlderAdult,
}

impl AgeGroup {
    pub const ALL: [AgeGroup; 3] = [
        AgeGroup::Childhood,
        AgeGroup::Adulthood,
        AgeGroup::OlderAdult,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            AgeGroup::Childhood => "childhood",
            AgeGroup::Adulthood => "adulthood",
            AgeGroup::OlderAdult => "older_adult",
        }
    }
}

impl fmt::Display for AgeGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for AgeGroup {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "childhood" => Ok(AgeGroup::Childhood),
            "adulthood" => Ok(AgeGroup::Adulthood),
            "older_adult" => Ok(AgeGroup::OlderAdult),
            other => Err(other.to_string()),
        }
    }
}

/// Which summarisation instruction produced a summary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptCondition {
    Regular,
    AgeAware,
}

impl PromptCondition {
    pub fn label(&self) -> &'static str {
        match self {
            PromptCondition::Regular => "regular",
            PromptCondition::AgeAware => "age_aware",
        }
    }
}

impl fmt::Display for PromptCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for PromptCondition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "regular" => Ok(PromptCondition::Regular),
            "age_aware" => Ok(PromptCondition::AgeAware),
            other => Err(other.to_string()),
        }
    }
}

/// One systematic review: its identifier, cohort, gold abstract text, and
/// optionally a pre-annotated gold entity set.
#[derive(Debug, Clone, PartialEq)]
pub struct Review {
    pub review_id: String,
    pub age_group: AgeGroup,
    pub gold_abstract: String,
    /// Absent gold entities are derived by rule-based extraction at
    /// scoring time.
    pub gold_entities: Option<EntitySet>,
}

/// One generated synthesis of a review under a specific system and prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRecord {
    pub review_id: String,
    pub system_id: String,
    pub prompt_condition: PromptCondition,
    pub text: String,
    /// Pre-computed metric columns (e.g. model-based scores) ingested for
    /// the correlation study only.
    pub external_scores: Option<BTreeMap<String, f64>>,
}

impl SummaryRecord {
    /// The (review, system, prompt) key that must be unique per corpus.
    pub fn key(&self) -> (&str, &str, PromptCondition) {
        (&self.review_id, &self.system_id, self.prompt_condition)
    }
}

/// The full evaluation corpus. Immutable after load; share freely across
/// threads.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub reviews: Vec<Review>,
    pub summaries: Vec<SummaryRecord>,
}

impl Corpus {
    pub fn review(&self, review_id: &str) -> Option<&Review> {
        self.reviews.iter().find(|r| r.review_id == review_id)
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read corpus: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: malformed JSON record: {source}")]
    MalformedLine {
        line: usize,
        source: serde_json::Error,
    },
    #[error("line {line}: duplicate review_id {review_id:?}")]
    DuplicateReview { line: usize, review_id: String },
    #[error(
        "line {line}: duplicate summary key ({review_id:?}, {system_id:?}, {prompt_condition})"
    )]
    DuplicateSummary {
        line: usize,
        review_id: String,
        system_id: String,
        prompt_condition: PromptCondition,
    },
    #[error("line {line}: summary references unknown review_id {review_id:?}")]
    UnknownReview { line: usize, review_id: String },
    #[error("line {line}: unknown age_group label {label:?}")]
    UnknownAgeGroup { line: usize, label: String },
    #[error("line {line}: unknown prompt_condition label {label:?}")]
    UnknownPromptCondition { line: usize, label: String },
    #[error("line {line}: review {review_id:?} has an empty gold_abstract")]
    EmptyAbstract { line: usize, review_id: String },
}

/// Wire form of one JSONL record.
#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum RecordRepr {
    Review {
        review_id: String,
        age_group: String,
        gold_abstract: String,
        #[serde(skip_serializing_if = "Option::is_none")]
        gold_entities: Option<Vec<String>>,
    },
    Summary {
        review_id: String,
        system_id: String,
        prompt_condition: String,
        text: String,
        #[serde(skip_serializing_if = "Option::is_none")]
        external_scores: Option<BTreeMap<String, f64>>,
    },
}

/// A record successfully parsed from the file, with its line number.
enum ParsedRecord {
    Review(usize, Review),
    Summary(usize, SummaryRecord),
}

fn parse_record(line_no: usize, raw: &str) -> Result<ParsedRecord, CorpusError> {
    let repr: RecordRepr =
        serde_json::from_str(raw).map_err(|source| CorpusError::MalformedLine {
            line: line_no,
            source,
        })?;
    match repr {
        RecordRepr::Review {
            review_id,
            age_group,
            gold_abstract,
            gold_entities,
        } => {
            let age_group =
                age_group
                    .parse::<AgeGroup>()
                    .map_err(|label| CorpusError::UnknownAgeGroup {
                        line: line_no,
                        label,
                    })?;
            if gold_abstract.trim().is_empty() {
                return Err(CorpusError::EmptyAbstract {
                    line: line_no,
                    review_id,
                });
            }
            Ok(ParsedRecord::Review(
                line_no,
                Review {
                    review_id,
                    age_group,
                    gold_abstract,
                    gold_entities: gold_entities
                        .map(|e| EntitySet::from_raw(e, Provenance::GoldAnnotation)),
                },
            ))
        }
        RecordRepr::Summary {
            review_id,
            system_id,
            prompt_condition,
            text,
            external_scores,
        } => {
            let prompt_condition =
                prompt_condition
                    .parse::<PromptCondition>()
                    .map_err(|label| CorpusError::UnknownPromptCondition {
                        line: line_no,
                        label,
                    })?;
            Ok(ParsedRecord::Summary(
                line_no,
                SummaryRecord {
                    review_id,
                    system_id,
                    prompt_condition,
                    text,
                    external_scores,
                },
            ))
        }
    }
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>, CorpusError> {
    let file = File::open(path)?;
    let mut lines = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if !line.trim().is_empty() {
            lines.push((idx + 1, line));
        }
    }
    Ok(lines)
}

/// Loads and fully validates a corpus. The first violated constraint is
/// returned as an error; use [`load_corpus_lenient`] to collect all
/// problems instead.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus, CorpusError> {
    let mut reviews: Vec<Review> = Vec::new();
    let mut summaries: Vec<(usize, SummaryRecord)> = Vec::new();
    let mut review_ids: HashSet<String> = HashSet::new();

    for (line_no, raw) in read_lines(path.as_ref())? {
        match parse_record(line_no, &raw)? {
            ParsedRecord::Review(line, review) => {
                if !review_ids.insert(review.review_id.clone()) {
                    return Err(CorpusError::DuplicateReview {
                        line,
                        review_id: review.review_id,
                    });
                }
                reviews.push(review);
            }
            ParsedRecord::Summary(line, summary) => summaries.push((line, summary)),
        }
    }

    // Reference and uniqueness checks run after the whole file is parsed
    // so that summaries may precede their reviews.
    let mut summary_keys: HashSet<(String, String, PromptCondition)> = HashSet::new();
    let mut checked = Vec::with_capacity(summaries.len());
    for (line, summary) in summaries {
        if !review_ids.contains(&summary.review_id) {
            return Err(CorpusError::UnknownReview {
                line,
                review_id: summary.review_id,
            });
        }
        let key = (
            summary.review_id.clone(),
            summary.system_id.clone(),
            summary.prompt_condition,
        );
        if !summary_keys.insert(key) {
            return Err(CorpusError::DuplicateSummary {
                line,
                review_id: summary.review_id,
                system_id: summary.system_id,
                prompt_condition: summary.prompt_condition,
            });
        }
        checked.push(summary);
    }

    Ok(Corpus {
        reviews,
        summaries: checked,
    })
}

/// How serious a validation finding is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    /// Scoring can proceed; the condition is worth knowing about.
    Warning,
    /// The record violates a corpus invariant and is excluded or blocks
    /// a strict load.
    Error,
}

/// Machine-readable category of a validation finding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IssueKind {
    MalformedLine,
    DuplicateReview,
    DuplicateSummary,
    OrphanSummary,
    UnknownAgeGroup,
    UnknownPromptCondition,
    EmptyAbstract,
    MissingGoldEntities,
    EmptyGoldEntitySet,
}

impl IssueKind {
    pub fn severity(&self) -> Severity {
        match self {
            IssueKind::MissingGoldEntities | IssueKind::EmptyGoldEntitySet => Severity::Warning,
            _ => Severity::Error,
        }
    }
}

/// One validation finding, tied to a review and/or source line when known.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationIssue {
    pub kind: IssueKind,
    pub severity: Severity,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub review_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub line: Option<usize>,
    pub message: String,
}

impl ValidationIssue {
    fn new(
        kind: IssueKind,
        review_id: Option<String>,
        line: Option<usize>,
        message: String,
    ) -> Self {
        ValidationIssue {
            kind,
            severity: kind.severity(),
            review_id,
            line,
            message,
        }
    }
}

/// All findings from validating one corpus.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub issues: Vec<ValidationIssue>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.issues.is_empty()
    }

    pub fn has_errors(&self) -> bool {
        self.issues.iter().any(|i| i.severity == Severity::Error)
    }
}

fn issue_for_error(err: &CorpusError) -> Option<ValidationIssue> {
    match err {
        CorpusError::Io(_) => None,
        CorpusError::MalformedLine { line, .. } => Some(ValidationIssue::new(
            IssueKind::MalformedLine,
            None,
            Some(*line),
            err.to_string(),
        )),
        CorpusError::DuplicateReview { line, review_id } => Some(ValidationIssue::new(
            IssueKind::DuplicateReview,
            Some(review_id.clone()),
            Some(*line),
            err.to_string(),
        )),
        CorpusError::DuplicateSummary {
            line, review_id, ..
        } => Some(ValidationIssue::new(
            IssueKind::DuplicateSummary,
            Some(review_id.clone()),
            Some(*line),
            err.to_string(),
        )),
        CorpusError::UnknownReview { line, review_id } => Some(ValidationIssue::new(
            IssueKind::OrphanSummary,
            Some(review_id.clone()),
            Some(*line),
            err.to_string(),
        )),
        CorpusError::UnknownAgeGroup { line, .. } => Some(ValidationIssue::new(
            IssueKind::UnknownAgeGroup,
            None,
            Some(*line),
            err.to_string(),
        )),
        CorpusError::UnknownPromptCondition { line, .. } => Some(ValidationIssue::new(
            IssueKind::UnknownPromptCondition,
            None,
            Some(*line),
            err.to_string(),
        )),
        CorpusError::EmptyAbstract { line, review_id } => Some(ValidationIssue::new(
            IssueKind::EmptyAbstract,
            Some(review_id.clone()),
            Some(*line),
            err.to_string(),
        )),
    }
}

/// Loads a corpus while collecting constraint violations as issues
/// instead of failing. Offending records are dropped (first record wins
/// on duplicates), so the returned corpus always satisfies the corpus
/// invariants. IO failures still error.
pub fn load_corpus_lenient(
    path: impl AsRef<Path>,
) -> Result<(Corpus, Vec<ValidationIssue>), CorpusError> {
    let mut issues = Vec::new();
    let mut reviews: Vec<Review> = Vec::new();
    let mut pending: Vec<(usize, SummaryRecord)> = Vec::new();
    let mut review_ids: HashSet<String> = HashSet::new();

    for (line_no, raw) in read_lines(path.as_ref())? {
        match parse_record(line_no, &raw) {
            Ok(ParsedRecord::Review(line, review)) => {
                if review_ids.insert(review.review_id.clone()) {
                    reviews.push(review);
                } else {
                    let err = CorpusError::DuplicateReview {
                        line,
                        review_id: review.review_id,
                    };
                    issues.extend(issue_for_error(&err));
                }
            }
            Ok(ParsedRecord::Summary(line, summary)) => pending.push((line, summary)),
            Err(err @ CorpusError::Io(_)) => return Err(err),
            Err(err) => issues.extend(issue_for_error(&err)),
        }
    }

    let mut summary_keys: HashSet<(String, String, PromptCondition)> = HashSet::new();
    let mut summaries = Vec::with_capacity(pending.len());
    for (line, summary) in pending {
        if !review_ids.contains(&summary.review_id) {
            let err = CorpusError::UnknownReview {
                line,
                review_id: summary.review_id,
            };
            issues.extend(issue_for_error(&err));
            continue;
        }
        let key = (
            summary.review_id.clone(),
            summary.system_id.clone(),
            summary.prompt_condition,
        );
        if summary_keys.insert(key) {
            summaries.push(summary);
        } else {
            let err = CorpusError::DuplicateSummary {
                line,
                review_id: summary.review_id,
                system_id: summary.system_id,
                prompt_condition: summary.prompt_condition,
            };
            issues.extend(issue_for_error(&err));
        }
    }

    Ok((Corpus { reviews, summaries }, issues))
}

/// Writes `corpus` as JSONL, reviews before summaries, in stored order.
/// Loading the result reproduces `corpus` exactly.
pub fn write_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<(), CorpusError> {
    let file = File::create(path.as_ref())?;
    let mut out = BufWriter::new(file);
    for review in &corpus.reviews {
        let repr = RecordRepr::Review {
            review_id: review.review_id.clone(),
            age_group: review.age_group.label().to_string(),
            gold_abstract: review.gold_abstract.clone(),
            gold_entities: review
                .gold_entities
                .as_ref()
                .map(|set| set.iter().map(str::to_string).collect()),
        };
        serde_json::to_writer(&mut out, &repr).map_err(|e| CorpusError::Io(e.into()))?;
        out.write_all(b"\n")?;
    }
    for summary in &corpus.summaries {
        let repr = RecordRepr::Summary {
            review_id: summary.review_id.clone(),
            system_id: summary.system_id.clone(),
            prompt_condition: summary.prompt_condition.label().to_string(),
            text: summary.text.clone(),
            external_scores: summary.external_scores.clone(),
        };
        serde_json::to_writer(&mut out, &repr).map_err(|e| CorpusError::Io(e.into()))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Returns the sub-corpus matching every provided predicate. Filtering by
/// age group drops the excluded reviews' summaries too, preserving
/// referential integrity.
pub fn filter_corpus(
    corpus: &Corpus,
    age_group: Option<AgeGroup>,
    system_id: Option<&str>,
    prompt_condition: Option<PromptCondition>,
) -> Corpus {
    let reviews: Vec<Review> = corpus
        .reviews
        .iter()
        .filter(|r| age_group.is_none_or(|g| r.age_group == g))
        .cloned()
        .collect();
    let kept_ids: HashSet<&str> = reviews.iter().map(|r| r.review_id.as_str()).collect();
    let summaries = corpus
        .summaries
        .iter()
        .filter(|s| {
            kept_ids.contains(s.review_id.as_str())
                && system_id.is_none_or(|id| s.system_id == id)
                && prompt_condition.is_none_or(|p| s.prompt_condition == p)
        })
        .cloned()
        .collect();
    Corpus { reviews, summaries }
}

/// Checks a corpus (however it was built) against the corpus invariants
/// and scoring preconditions. Never mutates the input.
pub fn validate_corpus(corpus: &Corpus) -> ValidationReport {
    let mut issues = Vec::new();

    let mut seen_reviews: HashMap<&str, usize> = HashMap::new();
    for review in &corpus.reviews {
        *seen_reviews.entry(review.review_id.as_str()).or_insert(0) += 1;
        if review.gold_abstract.trim().is_empty() {
            issues.push(ValidationIssue::new(
                IssueKind::EmptyAbstract,
                Some(review.review_id.clone()),
                None,
                format!("review {:?} has an empty gold_abstract", review.review_id),
            ));
        }
        match &review.gold_entities {
            None => issues.push(ValidationIssue::new(
                IssueKind::MissingGoldEntities,
                Some(review.review_id.clone()),
                None,
                format!(
                    "review {:?} has no gold_entities; they will be derived by extraction",
                    review.review_id
                ),
            )),
            Some(set) if set.is_empty() => issues.push(ValidationIssue::new(
                IssueKind::EmptyGoldEntitySet,
                Some(review.review_id.clone()),
                None,
                format!(
                    "review {:?} has an empty gold entity set; scoring will skip it",
                    review.review_id
                ),
            )),
            Some(_) => {}
        }
    }
    for (id, count) in seen_reviews.iter() {
        if *count > 1 {
            issues.push(ValidationIssue::new(
                IssueKind::DuplicateReview,
                Some(id.to_string()),
                None,
                format!("review_id {id:?} appears {count} times"),
            ));
        }
    }

    let mut summary_keys: HashSet<(String, String, PromptCondition)> = HashSet::new();
    for summary in &corpus.summaries {
        if !seen_reviews.contains_key(summary.review_id.as_str()) {
            issues.push(ValidationIssue::new(
                IssueKind::OrphanSummary,
                Some(summary.review_id.clone()),
                None,
                format!(
                    "summary ({:?}, {:?}, {}) references an unknown review",
                    summary.review_id, summary.system_id, summary.prompt_condition
                ),
            ));
        }
        let key = (
            summary.review_id.clone(),
            summary.system_id.clone(),
            summary.prompt_condition,
        );
        if !summary_keys.insert(key) {
            issues.push(ValidationIssue::new(
                IssueKind::DuplicateSummary,
                Some(summary.review_id.clone()),
                None,
                format!(
                    "duplicate summary key ({:?}, {:?}, {})",
                    summary.review_id, summary.system_id, summary.prompt_condition
                ),
            ));
        }
    }

    // Deterministic report order regardless of construction path.
    issues.sort_by(|a, b| {
        (a.review_id.as_deref(), a.kind as u8, &a.message).cmp(&(
            b.review_id.as_deref(),
            b.kind as u8,
            &b.message,
        ))
    });
    ValidationReport { issues }
}
