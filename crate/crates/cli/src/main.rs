//! `demsal` — demographic salience scoring for biomedical summaries.
//!
//! Exit codes: 0 on success, 1 when the corpus has validation findings
//! (or nothing scoreable), 2 on environment or usage errors, including
//! provider failures after partial results were flushed.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use demsal::corpus::{self, Corpus, CorpusError, PromptCondition, Severity, ValidationReport};
use demsal::extraction::{extract_generative_with, HttpGenerativeClient};
use demsal::pipeline::{
    annotate_gold_rule_based, compare_systems, group_metric_value, score_corpus_default,
    CompareMetric, ScoreRun,
};
use demsal::report::{self, CorrelationPair, CorrelationReport};
use demsal::scoring::{sensitivity_grid, GridAxes, HpDenominatorMode};
use demsal::stats::{pearson, EffectSizeMethod};

use config::{EmbeddingProviderConfig, RunConfig};

#[derive(Parser)]
#[command(
    name = "demsal",
    version,
    about = "Measures how faithfully generated biomedical summaries preserve age-demographic information"
)]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

/// Flags mirroring the run configuration; any flag given here overrides
/// the corresponding config-file field.
#[derive(Args)]
struct Overrides {
    /// TOML run configuration; flags override its fields.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Corpus JSONL file.
    #[arg(long, global = true, value_name = "FILE")]
    corpus: Option<PathBuf>,

    /// Directory reports are written to.
    #[arg(long, global = true, value_name = "DIR")]
    output_dir: Option<PathBuf>,

    /// Cosine similarity at or above which a gold entity counts as matched.
    #[arg(long, global = true, value_name = "REAL")]
    match_threshold: Option<f64>,

    /// Cosine similarity below which a generated entity counts as hallucinated.
    #[arg(long, global = true, value_name = "REAL")]
    hallucination_threshold: Option<f64>,

    /// Weight on entity retention in the DSS.
    #[arg(long, global = true, value_name = "REAL")]
    alpha: Option<f64>,

    /// Weight on the hallucination penalty in the DSS.
    #[arg(long, global = true, value_name = "REAL")]
    gamma: Option<f64>,

    /// Token budget before the over-length penalty applies.
    #[arg(long, global = true, value_name = "TOKENS")]
    t_max: Option<usize>,

    /// Denominator of the hallucination penalty.
    #[arg(long, global = true, value_enum)]
    hp_mode: Option<HpModeArg>,

    /// Effect-size estimate reported with the omnibus test.
    #[arg(long, global = true, value_enum)]
    effect_method: Option<EffectMethodArg>,

    /// Embedding backend.
    #[arg(long, global = true, value_enum)]
    embedding_provider: Option<ProviderArg>,

    /// Endpoint of the remote embedding service.
    #[arg(long, global = true, value_name = "URL")]
    embedding_endpoint: Option<String>,

    /// Model name sent to the remote embedding service.
    #[arg(long, global = true, value_name = "NAME")]
    embedding_model: Option<String>,

    /// Worker threads for scoring (default: all cores). Has no effect
    /// on output bytes.
    #[arg(long, global = true, value_name = "N")]
    workers: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum HpModeArg {
    /// Divide hallucinations by the gold entity count (may exceed 1).
    Gold,
    /// Divide hallucinations by the generated entity count (stays in [0, 1]).
    Summary,
}

impl From<HpModeArg> for HpDenominatorMode {
    fn from(arg: HpModeArg) -> Self {
        match arg {
            HpModeArg::Gold => HpDenominatorMode::GoldSet,
            HpModeArg::Summary => HpDenominatorMode::SummarySet,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EffectMethodArg {
    EtaSquaredH,
    EpsilonSquared,
}

impl From<EffectMethodArg> for EffectSizeMethod {
    fn from(arg: EffectMethodArg) -> Self {
        match arg {
            EffectMethodArg::EtaSquaredH => EffectSizeMethod::EtaSquaredH,
            EffectMethodArg::EpsilonSquared => EffectSizeMethod::EpsilonSquared,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ProviderArg {
    Builtin,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ExtractorArg {
    /// Pattern-based extraction over the gold abstracts.
    Rule,
    /// Prompt a chat-completion endpoint (requires --gen-endpoint and
    /// --gen-model; reads GEN_API_KEY for auth).
    Generative,
}

#[derive(Subcommand)]
enum Command {
    /// Check corpus integrity and write a validation report.
    Validate,
    /// Fill in missing gold entity annotations and write the annotated corpus.
    Extract {
        #[arg(long, value_enum, default_value = "rule")]
        extractor: ExtractorArg,
        /// Chat-completion endpoint for the generative extractor.
        #[arg(long, value_name = "URL")]
        gen_endpoint: Option<String>,
        /// Model name for the generative extractor.
        #[arg(long, value_name = "NAME")]
        gen_model: Option<String>,
        /// Keep generative entities that are not substrings of the
        /// abstract instead of dropping them.
        #[arg(long)]
        keep_unsupported: bool,
        /// Where to write the annotated corpus
        /// (default: <output_dir>/annotated_corpus.jsonl).
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Score every summary and write score-card, group and audit reports.
    Score,
    /// Compare systems on a per-review metric with Kruskal-Wallis and
    /// Dunn post-hoc tests, per (age group, prompt condition).
    Compare {
        /// Metric to compare: ers, omission, or hallucination.
        #[arg(long, default_value = "ers")]
        metric: CompareMetric,
    },
    /// Recompute the DSS over a (threshold x alpha x gamma) grid.
    Sensitivity {
        /// System whose summaries the grid scores.
        #[arg(long)]
        system: String,
        /// Prompt condition: regular or age_aware.
        #[arg(long, default_value = "regular")]
        prompt: PromptCondition,
        /// Similarity thresholds (match and hallucination tied per cell).
        #[arg(long, value_delimiter = ',', default_value = "0.5,0.6,0.7,0.8,0.9")]
        thresholds: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "1,1.5,2")]
        alphas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "1,1.5,2")]
        gammas: Vec<f64>,
    },
    /// Pearson correlation between two group-level metrics.
    Correlate {
        /// First metric: dss, dss_raw, ers, hp, op, omission, bleu, or
        /// an ingested external score name.
        #[arg(long)]
        metric_a: String,
        /// Second metric, same choices as --metric-a.
        #[arg(long)]
        metric_b: String,
    },
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}

fn run() -> Result<u8> {
    let cli = Cli::parse();
    if let Some(workers) = cli.overrides.workers {
        if workers == 0 {
            bail!("--workers must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
            .context("failed to initialise the worker pool")?;
    }
    let config = effective_config(&cli.overrides)?;

    match cli.command {
        Command::Validate => cmd_validate(&config),
        Command::Extract {
            extractor,
            gen_endpoint,
            gen_model,
            keep_unsupported,
            out,
        } => cmd_extract(
            &config,
            extractor,
            gen_endpoint,
            gen_model,
            keep_unsupported,
            out,
        ),
        Command::Score => cmd_score(&config),
        Command::Compare { metric } => cmd_compare(&config, metric),
        Command::Sensitivity {
            system,
            prompt,
            thresholds,
            alphas,
            gammas,
        } => cmd_sensitivity(&config, &system, prompt, &thresholds, &alphas, &gammas),
        Command::Correlate { metric_a, metric_b } => cmd_correlate(&config, metric_a, metric_b),
    }
}

/// Config file (or defaults) with CLI flags applied on top, validated.
fn effective_config(overrides: &Overrides) -> Result<RunConfig> {
    let mut config = match &overrides.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(v) = &overrides.corpus {
        config.corpus_path = v.clone();
    }
    if let Some(v) = &overrides.output_dir {
        config.output_dir = v.clone();
    }
    if let Some(v) = overrides.match_threshold {
        config.match_threshold = v;
    }
    if let Some(v) = overrides.hallucination_threshold {
        config.hallucination_threshold = v;
    }
    if let Some(v) = overrides.alpha {
        config.alpha = v;
    }
    if let Some(v) = overrides.gamma {
        config.gamma = v;
    }
    if let Some(v) = overrides.t_max {
        config.t_max = v;
    }
    if let Some(v) = overrides.hp_mode {
        config.hp_mode = v.into();
    }
    if let Some(v) = overrides.effect_method {
        config.effect_method = v.into();
    }
    config.embedding_provider = merge_provider(
        config.embedding_provider,
        overrides.embedding_provider,
        overrides.embedding_endpoint.clone(),
        overrides.embedding_model.clone(),
    )?;
    config.validate()?;
    Ok(config)
}

fn merge_provider(
    configured: EmbeddingProviderConfig,
    kind: Option<ProviderArg>,
    endpoint: Option<String>,
    model: Option<String>,
) -> Result<EmbeddingProviderConfig> {
    match kind {
        Some(ProviderArg::Builtin) => {
            if endpoint.is_some() || model.is_some() {
                bail!("--embedding-endpoint/--embedding-model conflict with --embedding-provider builtin");
            }
            Ok(EmbeddingProviderConfig::Builtin)
        }
        Some(ProviderArg::Remote) | None => {
            let (base_endpoint, base_model) = match configured {
                EmbeddingProviderConfig::Remote { endpoint, model } => {
                    (Some(endpoint), Some(model))
                }
                EmbeddingProviderConfig::Builtin => (None, None),
            };
            let merged_endpoint = endpoint.or(base_endpoint);
            let merged_model = model.or(base_model);
            match (kind, merged_endpoint, merged_model) {
                // no provider flag and nothing remote anywhere: builtin
                (None, None, None) => Ok(EmbeddingProviderConfig::Builtin),
                (_, Some(endpoint), Some(model)) => {
                    Ok(EmbeddingProviderConfig::Remote { endpoint, model })
                }
                (_, Some(_), None) => bail!("remote embedding needs --embedding-model"),
                (_, None, Some(_)) => bail!("remote embedding needs --embedding-endpoint"),
                (Some(_), None, None) => {
                    bail!("--embedding-provider remote needs --embedding-endpoint and --embedding-model")
                }
            }
        }
    }
}

fn corpus_read_error(path: &Path, source: std::io::Error) -> anyhow::Error {
    anyhow!("cannot read corpus {}: {source}", path.display())
}

/// Strict corpus load. `Err` means an environment problem (exit 2);
/// `Ok(Err(message))` means the corpus itself is invalid (exit 1).
fn load_strict(path: &Path) -> Result<Result<Corpus, String>> {
    match corpus::load_corpus(path) {
        Ok(corpus) => Ok(Ok(corpus)),
        Err(CorpusError::Io(source)) => Err(corpus_read_error(path, source)),
        Err(data) => Ok(Err(data.to_string())),
    }
}

macro_rules! corpus_or_exit {
    ($config:expr) => {
        match load_strict(&$config.corpus_path)? {
            Ok(corpus) => corpus,
            Err(message) => {
                eprintln!("corpus failed validation: {message}");
                eprintln!("hint: run `demsal validate` for a full report");
                return Ok(1);
            }
        }
    };
}

fn cmd_validate(config: &RunConfig) -> Result<u8> {
    let (corpus, mut issues) = match corpus::load_corpus_lenient(&config.corpus_path) {
        Ok(pair) => pair,
        Err(CorpusError::Io(source)) => return Err(corpus_read_error(&config.corpus_path, source)),
        Err(other) => return Err(anyhow!(other)),
    };
    issues.extend(corpus::validate_corpus(&corpus).issues);
    let validation = ValidationReport { issues };

    let out = config.output_dir.join("validation.json");
    report::write_report(&out, &report::render_validation_json(&validation)?)?;

    let errors = validation
        .issues
        .iter()
        .filter(|i| i.severity == Severity::Error)
        .count();
    let warnings = validation.issues.len() - errors;
    for issue in &validation.issues {
        eprintln!("{:?}: {}", issue.severity, issue.message);
    }
    println!(
        "validation: {errors} error(s), {warnings} warning(s) -> {}",
        out.display()
    );
    Ok(if errors > 0 { 1 } else { 0 })
}

fn cmd_extract(
    config: &RunConfig,
    extractor: ExtractorArg,
    gen_endpoint: Option<String>,
    gen_model: Option<String>,
    keep_unsupported: bool,
    out: Option<PathBuf>,
) -> Result<u8> {
    let corpus = corpus_or_exit!(config);
    let already = corpus
        .reviews
        .iter()
        .filter(|r| r.gold_entities.is_some())
        .count();

    let annotated = match extractor {
        ExtractorArg::Rule => annotate_gold_rule_based(&corpus),
        ExtractorArg::Generative => {
            let endpoint = gen_endpoint
                .ok_or_else(|| anyhow!("--extractor generative requires --gen-endpoint"))?;
            let model =
                gen_model.ok_or_else(|| anyhow!("--extractor generative requires --gen-model"))?;
            let client = HttpGenerativeClient::new(endpoint, model);
            let mut annotated = corpus.clone();
            for review in &mut annotated.reviews {
                if review.gold_entities.is_some() {
                    continue;
                }
                let extraction =
                    extract_generative_with(&client, &review.gold_abstract, keep_unsupported)
                        .with_context(|| {
                            format!(
                                "generative extraction failed for review {}",
                                review.review_id
                            )
                        })?;
                for item in &extraction.unsupported {
                    eprintln!(
                        "warning: review {}: extractor returned {item:?}, which is not in the abstract ({})",
                        review.review_id,
                        if keep_unsupported { "kept" } else { "dropped" },
                    );
                }
                review.gold_entities = Some(extraction.entities);
            }
            annotated
        }
    };

    let out_path = out.unwrap_or_else(|| config.output_dir.join("annotated_corpus.jsonl"));
    if let Some(parent) = out_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    corpus::write_corpus(&annotated, &out_path)
        .with_context(|| format!("cannot write {}", out_path.display()))?;
    println!(
        "annotated {} of {} reviews ({} already annotated) -> {}",
        annotated.reviews.len() - already,
        annotated.reviews.len(),
        already,
        out_path.display()
    );
    Ok(0)
}

/// Scores the corpus, or exits early with the right code when the
/// corpus is invalid. Per-summary failures are left in the run.
fn run_scoring(config: &RunConfig) -> Result<Result<ScoreRun, u8>> {
    let corpus = match load_strict(&config.corpus_path)? {
        Ok(corpus) => corpus,
        Err(message) => {
            eprintln!("corpus failed validation: {message}");
            eprintln!("hint: run `demsal validate` for a full report");
            return Ok(Err(1));
        }
    };
    let provider = config.provider();
    let run = score_corpus_default(&corpus, provider.as_ref(), &config.score_options())?;
    for skip in &run.skipped {
        eprintln!("skipped review {}: {}", skip.review_id, skip.reason);
    }
    Ok(Ok(run))
}

fn report_failures(run: &ScoreRun) {
    for failure in &run.failures {
        eprintln!(
            "failed to score review {} / system {} / {}: {}",
            failure.review_id,
            failure.system_id,
            failure.prompt_condition.label(),
            failure.error
        );
    }
}

fn cmd_score(config: &RunConfig) -> Result<u8> {
    let run = match run_scoring(config)? {
        Ok(run) => run,
        Err(code) => return Ok(code),
    };
    if run.scored.is_empty() && run.failures.is_empty() {
        eprintln!("no summaries were scored: the corpus has no scoreable (review, summary) pairs");
        return Ok(1);
    }

    // flush whatever scored, even when some summaries failed
    let dir = &config.output_dir;
    report::write_report(
        &dir.join("scorecards.csv"),
        &report::render_scorecards_csv(&run.scored)?,
    )?;
    report::write_report(
        &dir.join("group_scores.csv"),
        &report::render_group_scores_csv(&run.groups)?,
    )?;
    report::write_report(
        &dir.join("entity_audit.jsonl"),
        &report::render_entity_audit_jsonl(&run.scored)?,
    )?;
    println!(
        "scored {} summaries into {} groups -> {}",
        run.scored.len(),
        run.groups.len(),
        dir.display()
    );

    if !run.failures.is_empty() {
        report_failures(&run);
        eprintln!(
            "{} of {} summaries failed; partial results were written",
            run.failures.len(),
            run.failures.len() + run.scored.len()
        );
        return Ok(2);
    }
    Ok(0)
}

fn cmd_compare(config: &RunConfig, metric: CompareMetric) -> Result<u8> {
    let run = match run_scoring(config)? {
        Ok(run) => run,
        Err(code) => return Ok(code),
    };
    if !run.failures.is_empty() {
        report_failures(&run);
        eprintln!("comparison aborted: statistics over partial results would be misleading");
        return Ok(2);
    }
    let blocks = match compare_systems(&run.scored, metric, config.effect_method) {
        Ok(blocks) => blocks,
        Err(err) => {
            eprintln!("comparison failed: {err}");
            return Ok(2);
        }
    };

    let dir = &config.output_dir;
    report::write_report(
        &dir.join("comparison.json"),
        &report::render_comparison_json(&blocks)?,
    )?;
    report::write_report(
        &dir.join("comparison.csv"),
        &report::render_comparison_csv(&blocks)?,
    )?;
    for block in &blocks {
        println!(
            "{} / {} / {}: H = {:.4}, p = {:.4}, {} systems",
            block.age_group.label(),
            block.prompt_condition.label(),
            block.metric,
            block.omnibus.h_statistic,
            block.omnibus.p_value,
            block.systems.len()
        );
    }
    println!("comparison -> {}", dir.display());
    Ok(0)
}

fn cmd_sensitivity(
    config: &RunConfig,
    system: &str,
    prompt: PromptCondition,
    thresholds: &[f64],
    alphas: &[f64],
    gammas: &[f64],
) -> Result<u8> {
    let corpus = corpus_or_exit!(config);
    let provider = config.provider();
    let cells = match sensitivity_grid(
        &corpus,
        system,
        prompt,
        GridAxes {
            thresholds,
            alphas,
            gammas,
        },
        provider.as_ref(),
        &config.score_options(),
    ) {
        Ok(cells) => cells,
        Err(err) => {
            eprintln!("sensitivity analysis failed: {err}");
            return Ok(2);
        }
    };

    let out = config.output_dir.join("sensitivity.csv");
    report::write_report(&out, &report::render_sensitivity_csv(&cells)?)?;
    println!(
        "sensitivity grid for system {system} ({}): {} cells -> {}",
        prompt.label(),
        cells.len(),
        out.display()
    );
    Ok(0)
}

fn cmd_correlate(config: &RunConfig, metric_a: String, metric_b: String) -> Result<u8> {
    let run = match run_scoring(config)? {
        Ok(run) => run,
        Err(code) => return Ok(code),
    };
    if !run.failures.is_empty() {
        report_failures(&run);
        eprintln!("correlation aborted: statistics over partial results would be misleading");
        return Ok(2);
    }

    let mut pairs = Vec::new();
    for group in &run.groups {
        if let (Some(a), Some(b)) = (
            group_metric_value(group, &metric_a),
            group_metric_value(group, &metric_b),
        ) {
            pairs.push(CorrelationPair {
                age_group: group.score.age_group,
                system_id: group.score.system_id.clone(),
                prompt_condition: group.score.prompt_condition,
                value_a: a,
                value_b: b,
            });
        }
    }
    if pairs.len() < 2 {
        eprintln!(
            "correlation needs at least two group rows with both metrics; found {} of {}",
            pairs.len(),
            run.groups.len()
        );
        eprintln!("{}", available_metrics_hint(&run));
        return Ok(2);
    }

    let xs: Vec<f64> = pairs.iter().map(|p| p.value_a).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.value_b).collect();
    let r = match pearson(&xs, &ys) {
        Ok(r) => r,
        Err(err) => {
            eprintln!("correlation failed: {err}");
            return Ok(2);
        }
    };

    let summary = CorrelationReport {
        metric_a,
        metric_b,
        pearson_r: r,
        n: pairs.len(),
    };
    let dir = &config.output_dir;
    report::write_report(
        &dir.join("correlation.json"),
        &report::render_correlation_json(&summary)?,
    )?;
    report::write_report(
        &dir.join("correlation_pairs.csv"),
        &report::render_correlation_csv(&summary, &pairs)?,
    )?;
    println!(
        "pearson r({}, {}) = {r} over {} group rows -> {}",
        summary.metric_a,
        summary.metric_b,
        summary.n,
        dir.display()
    );
    Ok(0)
}

fn available_metrics_hint(run: &ScoreRun) -> String {
    let mut names = vec!["dss", "dss_raw", "ers", "hp", "op", "omission", "bleu"];
    let mut external: Vec<&str> = run
        .groups
        .iter()
        .flat_map(|g| g.external_means.keys().map(String::as_str))
        .collect();
    external.sort_unstable();
    external.dedup();
    names.extend(external);
    format!("available metrics: {}", names.join(", "))
}
