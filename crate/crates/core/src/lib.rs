//! Demographic salience evaluation for biomedical summaries.
//!
//! The crate measures how faithfully generated summaries preserve
//! age-demographic information from their source abstracts: rule-based and
//! generative entity extraction, embedding-based matching of extracted
//! entities against a gold set, retention / hallucination / overlength
//! scoring rolled up into a demographic salience score, and nonparametric
//! statistics for comparing summarisation systems.

pub mod corpus;
pub mod extraction;
pub mod matching;
pub mod pipeline;
pub mod report;
pub mod scoring;
pub mod stats;
