//! End-to-end scoring runs: gold resolution, per-summary extraction,
//! matching, score cards, BLEU, group aggregation, and the cross-system
//! statistical comparison.
//!
//! Per-summary work is independent and executes on the rayon thread
//! pool; results are collected in input order and aggregated by a
//! sequential fold, so output is identical for any worker count.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::Serialize;

use crate::corpus::{AgeGroup, Corpus, PromptCondition, Review, SummaryRecord};
use crate::extraction::{extract_rule_based, resolve_gold, EntitySet};
use crate::matching::{match_entities, EmbeddingProvider, MatchReport};
use crate::scoring::{
    bleu, build_score_card, group_dss, GroupScore, ScoreCard, ScoreError, ScoreOptions,
    TokenCounter, WhitespaceTokenCounter,
};
use crate::stats::{
    dunn_posthoc, kruskal_wallis_with_method, EffectSizeMethod, OmnibusResult, PairwiseResult,
    StatsError,
};

/// One fully scored summary.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSummary {
    pub card: ScoreCard,
    pub report: MatchReport,
    pub bleu: f64,
    /// Ingested metric columns carried through for reporting and
    /// correlation.
    pub external_scores: Option<BTreeMap<String, f64>>,
}

/// Group aggregate plus the per-group means that only exist at run level.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupResult {
    pub score: GroupScore,
    pub mean_omission: f64,
    pub mean_bleu: f64,
    /// Mean of each ingested metric over the group's summaries that
    /// carry it.
    pub external_means: BTreeMap<String, f64>,
}

/// A review excluded from scoring, with the reason.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkippedReview {
    pub review_id: String,
    pub reason: String,
}

/// A summary whose scoring failed (e.g. provider transport error).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreFailure {
    pub review_id: String,
    pub system_id: String,
    pub prompt_condition: PromptCondition,
    pub error: String,
}

/// Everything produced by one scoring run. Per-item problems are data
/// here, not errors: callers decide whether failures abort.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreRun {
    pub scored: Vec<ScoredSummary>,
    pub groups: Vec<GroupResult>,
    pub skipped: Vec<SkippedReview>,
    pub failures: Vec<ScoreFailure>,
}

/// Scores every summary in `corpus` and aggregates per
/// (age group, system, prompt condition).
///
/// Reviews whose gold entity set resolves empty are skipped with a
/// reason; summaries are matched against gold via `provider`, scored,
/// and BLEU'd against the gold abstract. Only configuration problems
/// return `Err` — per-summary failures are collected in the run.
pub fn score_corpus(
    corpus: &Corpus,
    provider: &dyn EmbeddingProvider,
    options: &ScoreOptions,
    counter: &dyn TokenCounter,
) -> Result<ScoreRun, ScoreError> {
    options.validate()?;

    let mut gold_by_review: HashMap<&str, EntitySet> = HashMap::new();
    let mut review_by_id: HashMap<&str, &Review> = HashMap::new();
    let mut skipped = Vec::new();
    for review in &corpus.reviews {
        review_by_id.insert(review.review_id.as_str(), review);
        let gold = resolve_gold(review);
        if gold.is_empty() {
            skipped.push(SkippedReview {
                review_id: review.review_id.clone(),
                reason: "empty gold entity set".to_string(),
            });
        } else {
            gold_by_review.insert(review.review_id.as_str(), gold);
        }
    }

    let results: Vec<Result<ScoredSummary, ScoreFailure>> = corpus
        .summaries
        .par_iter()
        .filter(|s| {
            // summaries of skipped reviews are excluded along with them;
            // orphans (possible only in hand-built corpora) surface as
            // failures below
            gold_by_review.contains_key(s.review_id.as_str())
                || !review_by_id.contains_key(s.review_id.as_str())
        })
        .map(|summary| {
            score_one(
                summary,
                &gold_by_review,
                &review_by_id,
                provider,
                options,
                counter,
            )
        })
        .collect();

    let mut scored = Vec::new();
    let mut failures = Vec::new();
    for result in results {
        match result {
            Ok(s) => scored.push(s),
            Err(f) => failures.push(f),
        }
    }

    let groups = aggregate_groups(&scored, options);
    Ok(ScoreRun {
        scored,
        groups,
        skipped,
        failures,
    })
}

fn score_one(
    summary: &SummaryRecord,
    gold_by_review: &HashMap<&str, EntitySet>,
    review_by_id: &HashMap<&str, &Review>,
    provider: &dyn EmbeddingProvider,
    options: &ScoreOptions,
    counter: &dyn TokenCounter,
) -> Result<ScoredSummary, ScoreFailure> {
    let fail = |error: String| ScoreFailure {
        review_id: summary.review_id.clone(),
        system_id: summary.system_id.clone(),
        prompt_condition: summary.prompt_condition,
        error,
    };
    let review = review_by_id
        .get(summary.review_id.as_str())
        .ok_or_else(|| fail("summary references an unknown review".to_string()))?;
    let gold = &gold_by_review[summary.review_id.as_str()];

    let generated = extract_rule_based(&summary.text);
    let mut report = match_entities(
        gold,
        &generated,
        provider,
        options.match_threshold,
        options.hallucination_threshold,
    )
    .map_err(|e| fail(e.to_string()))?;
    report.review_id = summary.review_id.clone();

    let t_gen = counter.count(&summary.text);
    let card = build_score_card(
        &report,
        review.age_group,
        &summary.system_id,
        summary.prompt_condition,
        t_gen,
        options,
    )
    .map_err(|e| fail(e.to_string()))?;

    Ok(ScoredSummary {
        card,
        report,
        bleu: bleu(&summary.text, &review.gold_abstract, 4),
        external_scores: summary.external_scores.clone(),
    })
}

fn aggregate_groups(scored: &[ScoredSummary], options: &ScoreOptions) -> Vec<GroupResult> {
    let mut by_key: BTreeMap<(AgeGroup, String, PromptCondition), Vec<&ScoredSummary>> =
        BTreeMap::new();
    for s in scored {
        by_key
            .entry((
                s.card.age_group,
                s.card.system_id.clone(),
                s.card.prompt_condition,
            ))
            .or_default()
            .push(s);
    }

    let mut groups = Vec::with_capacity(by_key.len());
    for (_, mut items) in by_key {
        items.sort_by(|a, b| a.card.review_id.cmp(&b.card.review_id));
        let cards: Vec<ScoreCard> = items.iter().map(|s| s.card.clone()).collect();
        let score = group_dss(&cards, options.alpha, options.gamma)
            .expect("cards are non-empty and share a key by construction");

        let n = items.len() as f64;
        let mean_omission = items.iter().map(|s| s.card.omission).sum::<f64>() / n;
        let mean_bleu = items.iter().map(|s| s.bleu).sum::<f64>() / n;

        let mut sums: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
        for item in &items {
            if let Some(ext) = &item.external_scores {
                for (name, value) in ext {
                    let entry = sums.entry(name.as_str()).or_insert((0.0, 0));
                    entry.0 += value;
                    entry.1 += 1;
                }
            }
        }
        let external_means = sums
            .into_iter()
            .map(|(name, (sum, count))| (name.to_string(), sum / count as f64))
            .collect();

        groups.push(GroupResult {
            score,
            mean_omission,
            mean_bleu,
            external_means,
        });
    }
    groups
}

/// Fills in any missing `gold_entities` by rule-based extraction over the
/// gold abstracts. Reviews that already carry annotations are untouched.
pub fn annotate_gold_rule_based(corpus: &Corpus) -> Corpus {
    let mut out = corpus.clone();
    for review in &mut out.reviews {
        if review.gold_entities.is_none() {
            review.gold_entities = Some(extract_rule_based(&review.gold_abstract));
        }
    }
    out
}

/// Scores a corpus with the default whitespace token counter.
pub fn score_corpus_default(
    corpus: &Corpus,
    provider: &dyn EmbeddingProvider,
    options: &ScoreOptions,
) -> Result<ScoreRun, ScoreError> {
    score_corpus(corpus, provider, options, &WhitespaceTokenCounter)
}

/// Which per-review metric a cross-system comparison tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CompareMetric {
    Ers,
    Omission,
    /// The hallucination penalty proper (without the over-length term).
    Hallucination,
}

impl CompareMetric {
    pub fn label(&self) -> &'static str {
        match self {
            CompareMetric::Ers => "ers",
            CompareMetric::Omission => "omission",
            CompareMetric::Hallucination => "hallucination",
        }
    }

    fn value(&self, card: &ScoreCard) -> f64 {
        match self {
            CompareMetric::Ers => card.ers,
            CompareMetric::Omission => card.omission,
            CompareMetric::Hallucination => card.hp,
        }
    }
}

impl std::str::FromStr for CompareMetric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ers" => Ok(CompareMetric::Ers),
            "omission" => Ok(CompareMetric::Omission),
            "hallucination" => Ok(CompareMetric::Hallucination),
            other => Err(format!(
                "unknown metric {other:?}; expected ers, omission, or hallucination"
            )),
        }
    }
}

/// Omnibus and pairwise results for one (age group, prompt) slice.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonBlock {
    pub age_group: AgeGroup,
    pub prompt_condition: PromptCondition,
    pub metric: String,
    /// Systems in label order; groups fed to the tests in this order.
    pub systems: Vec<String>,
    pub omnibus: OmnibusResult,
    pub pairwise: Vec<PairwiseResult>,
}

/// Per-review (review id, metric value) observations keyed first by
/// corpus slice, then by system.
type MetricSlices<'a> =
    BTreeMap<(AgeGroup, PromptCondition), BTreeMap<String, Vec<(&'a str, f64)>>>;

/// Compares systems on a per-review metric within every
/// (age group, prompt condition) slice that has at least two systems.
/// Observations are the per-review values of each system, ordered by
/// review id. Errors if no slice is comparable.
pub fn compare_systems(
    scored: &[ScoredSummary],
    metric: CompareMetric,
    effect_method: EffectSizeMethod,
) -> Result<Vec<ComparisonBlock>, StatsError> {
    let mut slices: MetricSlices<'_> = BTreeMap::new();
    for s in scored {
        slices
            .entry((s.card.age_group, s.card.prompt_condition))
            .or_default()
            .entry(s.card.system_id.clone())
            .or_default()
            .push((s.card.review_id.as_str(), metric.value(&s.card)));
    }

    let mut blocks = Vec::new();
    let mut max_systems = 0;
    for ((age_group, prompt_condition), by_system) in slices {
        max_systems = max_systems.max(by_system.len());
        if by_system.len() < 2 {
            continue;
        }
        let mut systems = Vec::with_capacity(by_system.len());
        let mut groups = Vec::with_capacity(by_system.len());
        for (system, mut values) in by_system {
            values.sort_by(|a, b| a.0.cmp(b.0));
            systems.push(system);
            groups.push(values.into_iter().map(|(_, v)| v).collect::<Vec<f64>>());
        }
        let omnibus = kruskal_wallis_with_method(&groups, effect_method)?;
        let pairwise = dunn_posthoc(&groups, &systems)?;
        blocks.push(ComparisonBlock {
            age_group,
            prompt_condition,
            metric: metric.label().to_string(),
            systems,
            omnibus,
            pairwise,
        });
    }
    if blocks.is_empty() {
        return Err(StatsError::TooFewGroups(max_systems));
    }
    Ok(blocks)
}

/// Group-level value of a named metric, for correlation runs. Built-in
/// names: `dss`, `dss_raw`, `ers`, `hp`, `op`, `omission`, `bleu`;
/// anything else is looked up among the ingested external means.
pub fn group_metric_value(group: &GroupResult, metric: &str) -> Option<f64> {
    match metric {
        "dss" => Some(group.score.dss_normalised),
        "dss_raw" => Some(group.score.dss_raw),
        "ers" => Some(group.score.mean_ers),
        "hp" => Some(group.score.mean_hp),
        "op" => Some(group.score.mean_op),
        "omission" => Some(group.mean_omission),
        "bleu" => Some(group.mean_bleu),
        other => group.external_means.get(other).copied(),
    }
}
