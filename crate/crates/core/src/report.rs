//! Renderers for every artifact the pipeline emits: score-card and
//! group CSVs, the entity audit JSONL, validation / comparison /
//! correlation JSON, and the sensitivity grid CSV.
//!
//! Everything renders to an in-memory `String` first so output is easy
//! to test byte-for-byte; rows are sorted on explicit keys and all
//! files end with a single trailing newline (LF), which makes artifacts
//! reproducible across runs and worker counts.

use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{AgeGroup, PromptCondition, ValidationReport};
use crate::pipeline::{ComparisonBlock, GroupResult, ScoredSummary};
use crate::scoring::SensitivityCell;

/// Failure while rendering or persisting an artifact.
#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv output was not valid utf-8")]
    Encoding,
}

fn finish_csv(writer: csv::Writer<Vec<u8>>) -> Result<String, ReportError> {
    let bytes = writer
        .into_inner()
        .map_err(|e| ReportError::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|_| ReportError::Encoding)
}

/// Writes `contents` to `path`, creating parent directories as needed.
pub fn write_report(path: &Path, contents: &str) -> Result<(), ReportError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, contents)?;
    Ok(())
}

#[derive(Serialize)]
struct ScoreCardRow<'a> {
    review_id: &'a str,
    system_id: &'a str,
    prompt_condition: &'a str,
    age_group: &'a str,
    ers: f64,
    omission: f64,
    hp: f64,
    op: f64,
    hp_adjusted: f64,
    t_gen: usize,
    t_max: usize,
    bleu: f64,
}

/// Per-summary score cards, one row per scored summary, sorted by
/// (review id, system id, prompt condition).
pub fn render_scorecards_csv(scored: &[ScoredSummary]) -> Result<String, ReportError> {
    let mut rows: Vec<&ScoredSummary> = scored.iter().collect();
    rows.sort_by(|a, b| {
        (
            &a.card.review_id,
            &a.card.system_id,
            a.card.prompt_condition.label(),
        )
            .cmp(&(
                &b.card.review_id,
                &b.card.system_id,
                b.card.prompt_condition.label(),
            ))
    });
    let mut writer = csv::Writer::from_writer(Vec::new());
    for s in rows {
        writer.serialize(ScoreCardRow {
            review_id: &s.card.review_id,
            system_id: &s.card.system_id,
            prompt_condition: s.card.prompt_condition.label(),
            age_group: s.card.age_group.label(),
            ers: s.card.ers,
            omission: s.card.omission,
            hp: s.card.hp,
            op: s.card.op,
            hp_adjusted: s.card.hp_adjusted,
            t_gen: s.card.t_gen,
            t_max: s.card.t_max,
            bleu: s.bleu,
        })?;
    }
    finish_csv(writer)
}

#[derive(Serialize)]
struct GroupRow<'a> {
    age_group: &'a str,
    system_id: &'a str,
    prompt_condition: &'a str,
    n_reviews: usize,
    bert_score: Option<f64>,
    bart_score: Option<f64>,
    bleu: f64,
    factcc: Option<f64>,
    ers: f64,
    hp: f64,
    omission: f64,
    op: f64,
    dss: f64,
    dss_raw: f64,
    alpha: f64,
    gamma: f64,
}

/// Group aggregates, one row per (age group, system, prompt condition).
/// The `bert_score`, `bart_score` and `factcc` columns are filled from
/// ingested external scores of the same name and left blank otherwise.
pub fn render_group_scores_csv(groups: &[GroupResult]) -> Result<String, ReportError> {
    let mut rows: Vec<&GroupResult> = groups.iter().collect();
    rows.sort_by(|a, b| group_sort_key(a).cmp(&group_sort_key(b)));
    let mut writer = csv::Writer::from_writer(Vec::new());
    for g in rows {
        writer.serialize(GroupRow {
            age_group: g.score.age_group.label(),
            system_id: &g.score.system_id,
            prompt_condition: g.score.prompt_condition.label(),
            n_reviews: g.score.n_reviews,
            bert_score: g.external_means.get("bert_score").copied(),
            bart_score: g.external_means.get("bart_score").copied(),
            bleu: g.mean_bleu,
            factcc: g.external_means.get("factcc").copied(),
            ers: g.score.mean_ers,
            hp: g.score.mean_hp,
            omission: g.mean_omission,
            op: g.score.mean_op,
            dss: g.score.dss_normalised,
            dss_raw: g.score.dss_raw,
            alpha: g.score.alpha,
            gamma: g.score.gamma,
        })?;
    }
    finish_csv(writer)
}

fn group_sort_key(g: &GroupResult) -> (&str, &str, &str) {
    (
        g.score.age_group.label(),
        g.score.system_id.as_str(),
        g.score.prompt_condition.label(),
    )
}

/// One line of the entity audit trail: which gold entities a summary
/// retained or omitted, and which of its own entities were unsupported.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityAuditRecord {
    pub review_id: String,
    pub system_id: String,
    pub prompt_condition: PromptCondition,
    pub retained: Vec<String>,
    pub omitted: Vec<String>,
    pub hallucinated: Vec<String>,
}

impl EntityAuditRecord {
    fn from_scored(s: &ScoredSummary) -> Self {
        let mut retained = s.report.exact_matches.clone();
        retained.extend(s.report.semantic_matches.iter().map(|m| m.gold.clone()));
        EntityAuditRecord {
            review_id: s.card.review_id.clone(),
            system_id: s.card.system_id.clone(),
            prompt_condition: s.card.prompt_condition,
            retained,
            omitted: s.report.omissions.clone(),
            hallucinated: s.report.hallucinations.clone(),
        }
    }
}

/// Entity audit trail as JSONL, one record per scored summary, sorted
/// by (review id, system id, prompt condition).
pub fn render_entity_audit_jsonl(scored: &[ScoredSummary]) -> Result<String, ReportError> {
    let mut records: Vec<EntityAuditRecord> =
        scored.iter().map(EntityAuditRecord::from_scored).collect();
    records.sort_by(|a, b| {
        (&a.review_id, &a.system_id, a.prompt_condition.label()).cmp(&(
            &b.review_id,
            &b.system_id,
            b.prompt_condition.label(),
        ))
    });
    let mut out = String::new();
    for record in &records {
        out.push_str(&serde_json::to_string(record)?);
        out.push('\n');
    }
    Ok(out)
}

/// Validation report as pretty-printed JSON.
pub fn render_validation_json(report: &ValidationReport) -> Result<String, ReportError> {
    let mut out = serde_json::to_string_pretty(report)?;
    out.push('\n');
    Ok(out)
}

#[derive(Serialize)]
struct CompareJsonRow<'a> {
    group: &'a str,
    prompt_condition: &'a str,
    metric: &'a str,
    #[serde(rename = "H")]
    h: f64,
    p: f64,
    effect_size: Option<f64>,
    method: &'a str,
    n_total: usize,
    pairs: Vec<ComparePairJson<'a>>,
}

#[derive(Serialize)]
struct ComparePairJson<'a> {
    a: &'a str,
    b: &'a str,
    z: f64,
    p_raw: f64,
    p_adj: f64,
}

fn compare_json_rows(blocks: &[ComparisonBlock]) -> Vec<CompareJsonRow<'_>> {
    blocks
        .iter()
        .map(|block| CompareJsonRow {
            group: block.age_group.label(),
            prompt_condition: block.prompt_condition.label(),
            metric: &block.metric,
            h: block.omnibus.h_statistic,
            p: block.omnibus.p_value,
            effect_size: block.omnibus.effect_size,
            method: block.omnibus.effect_method.label(),
            n_total: block.omnibus.n_total,
            pairs: block
                .pairwise
                .iter()
                .map(|pair| ComparePairJson {
                    a: &pair.group_a,
                    b: &pair.group_b,
                    z: pair.z_statistic,
                    p_raw: pair.p_raw,
                    p_adj: pair.p_adjusted,
                })
                .collect(),
        })
        .collect()
}

/// Comparison outcome as pretty-printed JSON: one object per
/// (age group, prompt condition) slice with nested pairwise results.
pub fn render_comparison_json(blocks: &[ComparisonBlock]) -> Result<String, ReportError> {
    let mut out = serde_json::to_string_pretty(&compare_json_rows(blocks))?;
    out.push('\n');
    Ok(out)
}

#[derive(Serialize)]
struct CompareCsvRow<'a> {
    age_group: &'a str,
    prompt_condition: &'a str,
    metric: &'a str,
    h_statistic: f64,
    p_value: f64,
    effect_size: Option<f64>,
    effect_method: &'a str,
    n_total: usize,
    group_a: &'a str,
    group_b: &'a str,
    z_statistic: f64,
    p_raw: f64,
    p_adjusted: f64,
}

/// Comparison outcome flattened to CSV: one row per pairwise
/// comparison, with the omnibus columns repeated per row.
pub fn render_comparison_csv(blocks: &[ComparisonBlock]) -> Result<String, ReportError> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for block in blocks {
        for pair in &block.pairwise {
            writer.serialize(CompareCsvRow {
                age_group: block.age_group.label(),
                prompt_condition: block.prompt_condition.label(),
                metric: &block.metric,
                h_statistic: block.omnibus.h_statistic,
                p_value: block.omnibus.p_value,
                effect_size: block.omnibus.effect_size,
                effect_method: block.omnibus.effect_method.label(),
                n_total: block.omnibus.n_total,
                group_a: &pair.group_a,
                group_b: &pair.group_b,
                z_statistic: pair.z_statistic,
                p_raw: pair.p_raw,
                p_adjusted: pair.p_adjusted,
            })?;
        }
    }
    finish_csv(writer)
}

#[derive(Serialize)]
struct SensitivityRow {
    threshold: f64,
    alpha: f64,
    gamma: f64,
    dss_normalised: f64,
}

/// Sensitivity grid as long-format CSV, rows in grid order
/// (threshold-major, then alpha, then gamma).
pub fn render_sensitivity_csv(cells: &[SensitivityCell]) -> Result<String, ReportError> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for cell in cells {
        writer.serialize(SensitivityRow {
            threshold: cell.match_threshold,
            alpha: cell.alpha,
            gamma: cell.gamma,
            dss_normalised: cell.dss_normalised,
        })?;
    }
    finish_csv(writer)
}

/// Headline result of a correlation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub metric_a: String,
    pub metric_b: String,
    pub pearson_r: f64,
    /// Number of group-level rows with both metrics available.
    pub n: usize,
}

/// One paired observation behind a correlation coefficient.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationPair {
    pub age_group: AgeGroup,
    pub system_id: String,
    pub prompt_condition: PromptCondition,
    pub value_a: f64,
    pub value_b: f64,
}

/// Correlation summary as pretty-printed JSON.
pub fn render_correlation_json(report: &CorrelationReport) -> Result<String, ReportError> {
    let mut out = serde_json::to_string_pretty(report)?;
    out.push('\n');
    Ok(out)
}

/// The paired group-level values behind a correlation, one row per
/// group, with the metric names as the value column headers.
pub fn render_correlation_csv(
    report: &CorrelationReport,
    pairs: &[CorrelationPair],
) -> Result<String, ReportError> {
    let mut rows: Vec<&CorrelationPair> = pairs.iter().collect();
    rows.sort_by(|a, b| {
        (
            a.age_group.label(),
            &a.system_id,
            a.prompt_condition.label(),
        )
            .cmp(&(
                b.age_group.label(),
                &b.system_id,
                b.prompt_condition.label(),
            ))
    });
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record([
        "age_group",
        "system_id",
        "prompt_condition",
        report.metric_a.as_str(),
        report.metric_b.as_str(),
    ])?;
    for pair in rows {
        writer.write_record([
            pair.age_group.label(),
            &pair.system_id,
            pair.prompt_condition.label(),
            &pair.value_a.to_string(),
            &pair.value_b.to_string(),
        ])?;
    }
    finish_csv(writer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{validate_corpus, Corpus, Review, SummaryRecord};
    use crate::extraction::{EntitySet, Provenance};
    use crate::matching::HashedTrigramEmbedder;
    use crate::pipeline::{compare_systems, score_corpus_default, CompareMetric};
    use crate::scoring::ScoreOptions;
    use crate::stats::EffectSizeMethod;
    use std::collections::BTreeMap;

    fn fixture_run() -> crate::pipeline::ScoreRun {
        let corpus = Corpus {
            reviews: vec![
                Review {
                    review_id: "r1".into(),
                    age_group: AgeGroup::Adulthood,
                    gold_abstract: "Adults aged 40 to 65 were enrolled.".into(),
                    gold_entities: Some(EntitySet::from_raw(
                        vec!["aged 40 to 65"],
                        Provenance::GoldAnnotation,
                    )),
                },
                Review {
                    review_id: "r2".into(),
                    age_group: AgeGroup::Childhood,
                    gold_abstract: "Infants 6 month-old were studied.".into(),
                    gold_entities: Some(EntitySet::from_raw(
                        vec!["6 month-old"],
                        Provenance::GoldAnnotation,
                    )),
                },
            ],
            summaries: vec![
                SummaryRecord {
                    review_id: "r1".into(),
                    system_id: "sys".into(),
                    prompt_condition: PromptCondition::Regular,
                    text: "Participants were aged 40 to 65.".into(),
                    external_scores: Some(BTreeMap::from([
                        ("bert_score".to_string(), 0.83),
                        ("factcc".to_string(), 0.71),
                    ])),
                },
                SummaryRecord {
                    review_id: "r2".into(),
                    system_id: "sys".into(),
                    prompt_condition: PromptCondition::Regular,
                    text: "The cohort was 99 years old.".into(),
                    external_scores: None,
                },
            ],
        };
        score_corpus_default(&corpus, &HashedTrigramEmbedder, &ScoreOptions::default()).unwrap()
    }

    #[test]
    fn scorecards_csv_shape_and_order() {
        let run = fixture_run();
        let csv_text = render_scorecards_csv(&run.scored).unwrap();
        let mut lines = csv_text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "review_id,system_id,prompt_condition,age_group,ers,omission,hp,op,hp_adjusted,t_gen,t_max,bleu"
        );
        let first = lines.next().unwrap();
        assert!(first.starts_with("r1,sys,regular,adulthood,1.0,0.0,"));
        let second = lines.next().unwrap();
        assert!(second.starts_with("r2,sys,regular,childhood,0.0,1.0,"));
        assert!(lines.next().is_none());
        assert!(csv_text.ends_with('\n'));
    }

    #[test]
    fn group_csv_has_table_metric_columns_in_order() {
        let run = fixture_run();
        let csv_text = render_group_scores_csv(&run.groups).unwrap();
        let header = csv_text.lines().next().unwrap();
        assert_eq!(
            header,
            "age_group,system_id,prompt_condition,n_reviews,bert_score,bart_score,bleu,\
             factcc,ers,hp,omission,op,dss,dss_raw,alpha,gamma"
        );
        // adulthood sorts before childhood; its bert_score/factcc cells
        // are filled, bart_score stays blank
        let row: Vec<&str> = csv_text.lines().nth(1).unwrap().split(',').collect();
        assert_eq!(row[0], "adulthood");
        assert_eq!(row[4], "0.83");
        assert_eq!(row[5], "");
        assert_eq!(row[7], "0.71");
        let child: Vec<&str> = csv_text.lines().nth(2).unwrap().split(',').collect();
        assert_eq!(child[0], "childhood");
        assert_eq!(child[4], "");
    }

    #[test]
    fn entity_audit_partitions_entities() {
        let run = fixture_run();
        let jsonl = render_entity_audit_jsonl(&run.scored).unwrap();
        let lines: Vec<&str> = jsonl.lines().collect();
        assert_eq!(lines.len(), 2);
        let first: EntityAuditRecord = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(first.review_id, "r1");
        assert_eq!(first.retained, vec!["aged 40 to 65"]);
        assert!(first.omitted.is_empty());
        let second: EntityAuditRecord = serde_json::from_str(lines[1]).unwrap();
        assert_eq!(second.omitted, vec!["6 month-old"]);
        assert_eq!(second.hallucinated, vec!["99 years old"]);
    }

    #[test]
    fn validation_json_round_trips() {
        let corpus = Corpus::default();
        let report = validate_corpus(&corpus);
        let json = render_validation_json(&report).unwrap();
        let back: ValidationReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
        assert!(json.ends_with('\n'));
    }

    fn comparison_fixture() -> Vec<ComparisonBlock> {
        let corpus = Corpus {
            reviews: (1..=3)
                .map(|i| Review {
                    review_id: format!("r{i}"),
                    age_group: AgeGroup::Adulthood,
                    gold_abstract: "Adults aged 40 to 65.".into(),
                    gold_entities: Some(EntitySet::from_raw(
                        vec!["aged 40 to 65"],
                        Provenance::GoldAnnotation,
                    )),
                })
                .collect(),
            summaries: (1..=3)
                .flat_map(|i| {
                    vec![
                        SummaryRecord {
                            review_id: format!("r{i}"),
                            system_id: "good".into(),
                            prompt_condition: PromptCondition::Regular,
                            text: "People aged 40 to 65.".into(),
                            external_scores: None,
                        },
                        SummaryRecord {
                            review_id: format!("r{i}"),
                            system_id: "bad".into(),
                            prompt_condition: PromptCondition::Regular,
                            text: "No ages here.".into(),
                            external_scores: None,
                        },
                    ]
                })
                .collect(),
        };
        let run = score_corpus_default(&corpus, &HashedTrigramEmbedder, &ScoreOptions::default())
            .unwrap();
        compare_systems(
            &run.scored,
            CompareMetric::Ers,
            EffectSizeMethod::EtaSquaredH,
        )
        .unwrap()
    }

    #[test]
    fn comparison_json_uses_contract_keys() {
        let blocks = comparison_fixture();
        let json = render_comparison_json(&blocks).unwrap();
        let value: serde_json::Value = serde_json::from_str(&json).unwrap();
        let row = &value.as_array().unwrap()[0];
        assert_eq!(row["group"], "adulthood");
        assert_eq!(row["metric"], "ers");
        assert!(row["H"].is_number());
        assert!(row["p"].is_number());
        assert_eq!(row["method"], "eta_squared_h");
        let pair = &row["pairs"].as_array().unwrap()[0];
        assert_eq!(pair["a"], "bad");
        assert_eq!(pair["b"], "good");
        assert!(pair["z"].is_number());
        assert!(pair["p_raw"].is_number());
        assert!(pair["p_adj"].is_number());
    }

    #[test]
    fn comparison_csv_flattens_one_row_per_pair() {
        let blocks = comparison_fixture();
        let csv_text = render_comparison_csv(&blocks).unwrap();
        let lines: Vec<&str> = csv_text.lines().collect();
        assert_eq!(
            lines[0],
            "age_group,prompt_condition,metric,h_statistic,p_value,effect_size,effect_method,\
             n_total,group_a,group_b,z_statistic,p_raw,p_adjusted"
        );
        // 2 systems -> 1 pair -> 1 data row
        assert_eq!(lines.len(), 2);
        assert!(lines[1].starts_with("adulthood,regular,ers,"));
    }

    #[test]
    fn sensitivity_csv_has_exactly_four_columns() {
        let cells = vec![
            SensitivityCell {
                match_threshold: 0.5,
                alpha: 1.0,
                gamma: 1.0,
                dss_raw: 2.0,
                dss_normalised: 1.0,
                n_reviews: 2,
            },
            SensitivityCell {
                match_threshold: 0.9,
                alpha: 2.0,
                gamma: 2.0,
                dss_raw: -1.0,
                dss_normalised: 0.0,
                n_reviews: 2,
            },
        ];
        let csv_text = render_sensitivity_csv(&cells).unwrap();
        let lines: Vec<&str> = csv_text.lines().collect();
        assert_eq!(lines[0], "threshold,alpha,gamma,dss_normalised");
        assert_eq!(lines[1], "0.5,1.0,1.0,1.0");
        assert_eq!(lines[2], "0.9,2.0,2.0,0.0");
    }

    #[test]
    fn correlation_renderers() {
        let report = CorrelationReport {
            metric_a: "dss".into(),
            metric_b: "bleu".into(),
            pearson_r: 0.97,
            n: 2,
        };
        let pairs = vec![
            CorrelationPair {
                age_group: AgeGroup::Childhood,
                system_id: "sys".into(),
                prompt_condition: PromptCondition::Regular,
                value_a: 0.72,
                value_b: 0.3,
            },
            CorrelationPair {
                age_group: AgeGroup::Adulthood,
                system_id: "sys".into(),
                prompt_condition: PromptCondition::Regular,
                value_a: 0.69,
                value_b: 0.2,
            },
        ];
        let json = render_correlation_json(&report).unwrap();
        let value: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(value["metric_a"], "dss");
        assert_eq!(value["pearson_r"], 0.97);
        assert_eq!(value["n"], 2);

        let csv_text = render_correlation_csv(&report, &pairs).unwrap();
        let lines: Vec<&str> = csv_text.lines().collect();
        assert_eq!(lines[0], "age_group,system_id,prompt_condition,dss,bleu");
        // sorted by age-group label: adulthood before childhood
        assert_eq!(lines[1], "adulthood,sys,regular,0.69,0.2");
        assert_eq!(lines[2], "childhood,sys,regular,0.72,0.3");
    }

    #[test]
    fn write_report_creates_parents() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/out/report.csv");
        write_report(&path, "a,b\n1,2\n").unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "a,b\n1,2\n");
    }

    #[test]
    fn renders_are_deterministic() {
        let run_a = fixture_run();
        let run_b = fixture_run();
        assert_eq!(
            render_scorecards_csv(&run_a.scored).unwrap(),
            render_scorecards_csv(&run_b.scored).unwrap()
        );
        assert_eq!(
            render_group_scores_csv(&run_a.groups).unwrap(),
            render_group_scores_csv(&run_b.groups).unwrap()
        );
        assert_eq!(
            render_entity_audit_jsonl(&run_a.scored).unwrap(),
            render_entity_audit_jsonl(&run_b.scored).unwrap()
        );
    }
}
