//! The demographic salience metric family: per-review retention,
//! omission, hallucination, and over-length penalties; group-level DSS
//! aggregation; BLEU for metric comparison; and the threshold/weight
//! sensitivity grid.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{AgeGroup, Corpus, PromptCondition};
use crate::extraction::{extract_rule_based, resolve_gold};
use crate::matching::{
    match_entities_with, EmbeddingProvider, EmbeddingScorer, MatchError, MatchReport,
};

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("gold entity set is empty; the review must be excluded from scoring")]
    EmptyGold,
    #[error("no score cards to aggregate")]
    NoCards,
    #[error("score cards mix group keys: ({0}) vs ({1})")]
    MixedKeys(String, String),
    #[error("threshold {0} outside (0, 1]")]
    InvalidThreshold(f64),
    #[error("weight {0} must be positive")]
    InvalidWeight(f64),
    #[error("no scorable reviews for system {system_id:?} under the {prompt_condition} prompt")]
    NoReviews {
        system_id: String,
        prompt_condition: PromptCondition,
    },
    #[error(transparent)]
    Match(#[from] MatchError),
}

/// Which denominator normalises the hallucination count.
///
/// `SummarySet` divides by the generated entity count and stays in
/// [0, 1]; `GoldSet` divides by the gold entity count and can exceed 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HpDenominatorMode {
    SummarySet,
    #[default]
    GoldSet,
}

/// Tunable knobs for a scoring run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreOptions {
    pub match_threshold: f64,
    pub hallucination_threshold: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub t_max: usize,
    pub hp_mode: HpDenominatorMode,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        ScoreOptions {
            match_threshold: 0.7,
            hallucination_threshold: 0.7,
            alpha: 2.0,
            gamma: 2.0,
            t_max: 750,
            hp_mode: HpDenominatorMode::GoldSet,
        }
    }
}

impl ScoreOptions {
    /// Rejects values outside the operation preconditions.
    pub fn validate(&self) -> Result<(), ScoreError> {
        for t in [self.match_threshold, self.hallucination_threshold] {
            if !(t > 0.0 && t <= 1.0) {
                return Err(ScoreError::InvalidThreshold(t));
            }
        }
        for w in [self.alpha, self.gamma] {
            if !(w.is_finite() && w > 0.0) {
                return Err(ScoreError::InvalidWeight(w));
            }
        }
        if self.t_max == 0 {
            return Err(ScoreError::InvalidWeight(0.0));
        }
        Ok(())
    }
}

/// Per-review metric bundle. `ers + omission == 1` and
/// `hp_adjusted == hp + op` hold exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreCard {
    pub review_id: String,
    pub system_id: String,
    pub prompt_condition: PromptCondition,
    pub age_group: AgeGroup,
    pub ers: f64,
    pub omission: f64,
    pub hp: f64,
    pub op: f64,
    pub hp_adjusted: f64,
    pub t_gen: usize,
    pub t_max: usize,
}

/// Aggregate over all reviews sharing (age group, system, prompt).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupScore {
    pub age_group: AgeGroup,
    pub system_id: String,
    pub prompt_condition: PromptCondition,
    pub n_reviews: usize,
    pub mean_ers: f64,
    pub mean_hp: f64,
    pub mean_op: f64,
    pub dss_raw: f64,
    pub dss_normalised: f64,
    pub alpha: f64,
    pub gamma: f64,
}

/// Fraction of gold entities found exactly or semantically.
/// `gold_size` must equal the report's gold total and be positive.
pub fn entity_retention(report: &MatchReport, gold_size: usize) -> Result<f64, ScoreError> {
    if gold_size == 0 {
        return Err(ScoreError::EmptyGold);
    }
    debug_assert_eq!(gold_size, report.gold_total);
    Ok(report.matched_gold_count() as f64 / gold_size as f64)
}

/// Fraction of gold entities missing: 1 − ERS.
pub fn omission_rate(ers: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&ers));
    1.0 - ers
}

/// Hallucination count over the mode's denominator. An empty generated
/// set scores 0 under `SummarySet`; an empty gold set is an error under
/// `GoldSet` (such reviews are excluded upstream).
pub fn hallucination_penalty(
    report: &MatchReport,
    mode: HpDenominatorMode,
) -> Result<f64, ScoreError> {
    let hallucinated = report.hallucinations.len() as f64;
    match mode {
        HpDenominatorMode::SummarySet => {
            if report.generated_total == 0 {
                Ok(0.0)
            } else {
                Ok(hallucinated / report.generated_total as f64)
            }
        }
        HpDenominatorMode::GoldSet => {
            if report.gold_total == 0 {
                Err(ScoreError::EmptyGold)
            } else {
                Ok(hallucinated / report.gold_total as f64)
            }
        }
    }
}

/// Excess tokens beyond the budget, as a fraction of the budget.
pub fn overlength_penalty(t_gen: usize, t_max: usize) -> f64 {
    debug_assert!(t_max > 0);
    t_gen.saturating_sub(t_max) as f64 / t_max as f64
}

/// Maps text to a token count. The default counts maximal non-whitespace
/// runs; alternative counters can be supplied to the pipeline.
pub trait TokenCounter: Send + Sync {
    fn count(&self, text: &str) -> usize;
}

/// The default counter: maximal runs of non-whitespace (Unicode rules).
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenCounter;

impl TokenCounter for WhitespaceTokenCounter {
    fn count(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }
}

/// Token count under the default whitespace counter.
pub fn count_tokens(text: &str) -> usize {
    WhitespaceTokenCounter.count(text)
}

/// Assembles the per-review metric bundle from a finished match report.
pub fn build_score_card(
    report: &MatchReport,
    age_group: AgeGroup,
    system_id: &str,
    prompt_condition: PromptCondition,
    t_gen: usize,
    options: &ScoreOptions,
) -> Result<ScoreCard, ScoreError> {
    let ers = entity_retention(report, report.gold_total)?;
    let hp = hallucination_penalty(report, options.hp_mode)?;
    let op = overlength_penalty(t_gen, options.t_max);
    Ok(ScoreCard {
        review_id: report.review_id.clone(),
        system_id: system_id.to_string(),
        prompt_condition,
        age_group,
        ers,
        omission: omission_rate(ers),
        hp,
        op,
        hp_adjusted: hp + op,
        t_gen,
        t_max: options.t_max,
    })
}

fn card_key(card: &ScoreCard) -> String {
    format!(
        "{}, {}, {}",
        card.age_group, card.system_id, card.prompt_condition
    )
}

/// Sums `ers` and `hp_adjusted` over cards in sorted review-id order and
/// applies the DSS weighting. Shared by group and pooled aggregation.
fn weighted_sums(cards: &[&ScoreCard], alpha: f64, gamma: f64) -> (f64, f64, f64, f64, f64) {
    let mut order: Vec<usize> = (0..cards.len()).collect();
    order.sort_by(|&a, &b| cards[a].review_id.cmp(&cards[b].review_id));
    let (mut sum_ers, mut sum_hp, mut sum_op, mut sum_hp_adj) = (0.0, 0.0, 0.0, 0.0);
    for &i in &order {
        sum_ers += cards[i].ers;
        sum_hp += cards[i].hp;
        sum_op += cards[i].op;
        sum_hp_adj += cards[i].hp_adjusted;
    }
    let dss_raw = alpha * sum_ers - gamma * sum_hp_adj;
    (sum_ers, sum_hp, sum_op, sum_hp_adj, dss_raw)
}

/// Aggregates score cards that share one (age group, system, prompt) key
/// into raw and normalised DSS. With `alpha == gamma` the normalised
/// score equals `max(0, mean_ers − mean_hp_adjusted)`.
pub fn group_dss(cards: &[ScoreCard], alpha: f64, gamma: f64) -> Result<GroupScore, ScoreError> {
    if cards.is_empty() {
        return Err(ScoreError::NoCards);
    }
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(ScoreError::InvalidWeight(alpha));
    }
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(ScoreError::InvalidWeight(gamma));
    }
    let first = &cards[0];
    for card in &cards[1..] {
        if card.age_group != first.age_group
            || card.system_id != first.system_id
            || card.prompt_condition != first.prompt_condition
        {
            return Err(ScoreError::MixedKeys(card_key(first), card_key(card)));
        }
    }

    let refs: Vec<&ScoreCard> = cards.iter().collect();
    let (sum_ers, sum_hp, sum_op, _, dss_raw) = weighted_sums(&refs, alpha, gamma);
    let n = cards.len() as f64;
    Ok(GroupScore {
        age_group: first.age_group,
        system_id: first.system_id.clone(),
        prompt_condition: first.prompt_condition,
        n_reviews: cards.len(),
        mean_ers: sum_ers / n,
        mean_hp: sum_hp / n,
        mean_op: sum_op / n,
        dss_raw,
        dss_normalised: (dss_raw / (alpha * n)).max(0.0),
        alpha,
        gamma,
    })
}

/// Sentence-level BLEU of `candidate` against a single `reference`:
/// geometric mean of modified n-gram precisions up to `max_n` with the
/// standard brevity penalty. Tokens are whitespace-delimited and
/// case-sensitive. For orders above 1 whose clipped match count is zero,
/// add-one smoothing replaces the raw ratio; a zero unigram precision
/// still yields 0. An empty candidate scores 0.
pub fn bleu(candidate: &str, reference: &str, max_n: usize) -> f64 {
    debug_assert!(max_n >= 1);
    let cand: Vec<&str> = candidate.split_whitespace().collect();
    let refr: Vec<&str> = reference.split_whitespace().collect();
    if cand.is_empty() {
        return 0.0;
    }

    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let cand_grams = ngram_counts(&cand, n);
        let ref_grams = ngram_counts(&refr, n);
        let total: usize = cand_grams.values().sum();
        let clipped: usize = cand_grams
            .iter()
            .map(|(gram, &count)| count.min(ref_grams.get(gram).copied().unwrap_or(0)))
            .sum();
        let precision = if clipped == 0 {
            if n == 1 {
                return 0.0;
            }
            (clipped + 1) as f64 / (total + 1) as f64
        } else {
            clipped as f64 / total as f64
        };
        log_sum += precision.ln();
    }
    let geo_mean = (log_sum / max_n as f64).exp();

    let c = cand.len() as f64;
    let r = refr.len() as f64;
    let brevity = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    (brevity * geo_mean).clamp(0.0, 1.0)
}

fn ngram_counts<'a>(tokens: &'a [&'a str], n: usize) -> HashMap<&'a [&'a str], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// One cell of the sensitivity sweep: the DSS of the (system, prompt)
/// slice pooled over all its scorable reviews, at one
/// (threshold, alpha, gamma) setting. The match threshold and
/// hallucination threshold are tied to the same value per cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensitivityCell {
    pub match_threshold: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub dss_raw: f64,
    pub dss_normalised: f64,
    pub n_reviews: usize,
}

/// The cross-product a sensitivity sweep walks: every listed threshold
/// against every (alpha, gamma) pair.
#[derive(Debug, Clone, Copy)]
pub struct GridAxes<'a> {
    pub thresholds: &'a [f64],
    pub alphas: &'a [f64],
    pub gammas: &'a [f64],
}

/// Re-runs matching and scoring for every (threshold, alpha, gamma) in
/// the cross-product, for one system under one prompt condition. Match
/// reports are computed once per threshold and reused across the
/// weight sweep. Rows are ordered threshold-major, then alpha, then
/// gamma.
pub fn sensitivity_grid(
    corpus: &Corpus,
    system_id: &str,
    prompt_condition: PromptCondition,
    axes: GridAxes<'_>,
    provider: &dyn EmbeddingProvider,
    options: &ScoreOptions,
) -> Result<Vec<SensitivityCell>, ScoreError> {
    let GridAxes {
        thresholds,
        alphas,
        gammas,
    } = axes;
    for &t in thresholds {
        if !(t > 0.0 && t <= 1.0) {
            return Err(ScoreError::InvalidThreshold(t));
        }
    }
    for &w in alphas.iter().chain(gammas) {
        if !(w.is_finite() && w > 0.0) {
            return Err(ScoreError::InvalidWeight(w));
        }
    }
    options.validate()?;

    // Reviews scorable for this slice: non-empty gold and a summary from
    // (system_id, prompt_condition).
    let mut work: Vec<(
        &str,
        crate::extraction::EntitySet,
        crate::extraction::EntitySet,
        usize,
    )> = Vec::new();
    for review in &corpus.reviews {
        let Some(summary) = corpus.summaries.iter().find(|s| {
            s.review_id == review.review_id
                && s.system_id == system_id
                && s.prompt_condition == prompt_condition
        }) else {
            continue;
        };
        let gold = resolve_gold(review);
        if gold.is_empty() {
            continue;
        }
        let generated = extract_rule_based(&summary.text);
        let t_gen = count_tokens(&summary.text);
        work.push((review.review_id.as_str(), gold, generated, t_gen));
    }
    if work.is_empty() {
        return Err(ScoreError::NoReviews {
            system_id: system_id.to_string(),
            prompt_condition,
        });
    }
    work.sort_by(|a, b| a.0.cmp(b.0));

    let mut cells = Vec::with_capacity(thresholds.len() * alphas.len() * gammas.len());
    for &threshold in thresholds {
        let cell_options = ScoreOptions {
            match_threshold: threshold,
            hallucination_threshold: threshold,
            ..options.clone()
        };
        // One pass of matching per threshold, reused for every (α, γ).
        let mut scorer = EmbeddingScorer::new(provider);
        let mut cards = Vec::with_capacity(work.len());
        for (review_id, gold, generated, t_gen) in &work {
            let mut report =
                match_entities_with(gold, generated, &mut scorer, threshold, threshold)?;
            report.review_id = review_id.to_string();
            // age_group is irrelevant to pooled DSS; cards are built per
            // review only for their ers/hp'/op components
            let review = corpus.review(review_id).expect("review exists");
            cards.push(build_score_card(
                &report,
                review.age_group,
                system_id,
                prompt_condition,
                *t_gen,
                &cell_options,
            )?);
        }

        let refs: Vec<&ScoreCard> = cards.iter().collect();
        for &alpha in alphas {
            for &gamma in gammas {
                let (_, _, _, _, dss_raw) = weighted_sums(&refs, alpha, gamma);
                let n = refs.len() as f64;
                cells.push(SensitivityCell {
                    match_threshold: threshold,
                    alpha,
                    gamma,
                    dss_raw,
                    dss_normalised: (dss_raw / (alpha * n)).max(0.0),
                    n_reviews: refs.len(),
                });
            }
        }
    }
    Ok(cells)
}
