//! Ranking metrics and split-level evaluation.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::corpus::{Split, SplitData};
use crate::embed_store::EmbeddingStore;
use crate::error::{Error, Result};
use crate::index::{NearestNeighbors, VectorIndex};
use crate::model::Model;

pub const DEFAULT_KS: [usize; 5] = [1, 5, 10, 50, 100];

/// `1 / rank` of `gold` (1-based), or 0 when absent.
pub fn reciprocal_rank<S: AsRef<str>>(ranked: &[S], gold: &str) -> f64 {
    ranked
        .iter()
        .position(|id| id.as_ref() == gold)
        .map_or(0.0, |p| 1.0 / (p + 1) as f64)
}

/// 1 when `gold` is among the first `k` ids.
pub fn hit_at_k<S: AsRef<str>>(ranked: &[S], gold: &str, k: usize) -> u8 {
    u8::from(ranked.iter().take(k).any(|id| id.as_ref() == gold))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub split: Split,
    pub n_questions: usize,
    pub n_tables: usize,
    /// Mean reciprocal rank in `[0, 1]`.
    pub mrr: f64,
    /// Gold-in-top-K rate per K (reported as `P@K`).
    pub hits: BTreeMap<usize, f64>,
    pub config_fingerprint: String,
    pub checkpoint_fingerprint: String,
}

/// Serializes as a map keyed by K in ascending numeric order.
struct PercentByK<'a>(&'a BTreeMap<usize, f64>);

impl Serialize for PercentByK<'_> {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_map(self.0.iter().map(|(k, v)| (k.to_string(), percent(*v))))
    }
}

#[derive(Serialize)]
struct ReportRecord<'a> {
    split: Split,
    mrr: f64,
    p_at_k: PercentByK<'a>,
    n_questions: usize,
    n_tables: usize,
    config_fingerprint: String,
    checkpoint_fingerprint: String,
}

fn percent(x: f64) -> f64 {
    (x * 10_000.0).round() / 100.0
}

impl EvalReport {
    /// Aggregates per-question gold ranks (1-based; `None` = not retrieved).
    pub fn from_ranks(split: Split, n_tables: usize, ranks: &[Option<usize>], ks: &[usize]) -> Self {
        let n = ranks.len().max(1) as f64;
        let mrr = ranks.iter().map(|r| r.map_or(0.0, |r| 1.0 / r as f64)).sum::<f64>() / n;
        let hits = ks
            .iter()
            .map(|&k| {
                let h = ranks.iter().filter(|r| matches!(r, Some(r) if *r <= k)).count();
                (k, h as f64 / n)
            })
            .collect();
        EvalReport {
            split,
            n_questions: ranks.len(),
            n_tables,
            mrr,
            hits,
            config_fingerprint: String::new(),
            checkpoint_fingerprint: String::new(),
        }
    }

    /// Serialized form: percentages rounded to two decimals.
    pub fn to_json(&self) -> String {
        let rec = ReportRecord {
            split: self.split,
            mrr: percent(self.mrr),
            p_at_k: PercentByK(&self.hits),
            n_questions: self.n_questions,
            n_tables: self.n_tables,
            config_fingerprint: self.config_fingerprint.clone(),
            checkpoint_fingerprint: self.checkpoint_fingerprint.clone(),
        };
        serde_json::to_string_pretty(&rec).expect("report serializes")
    }
}

fn require_nonempty(data: &SplitData) -> Result<()> {
    if data.questions.is_empty() || data.tables.is_empty() {
        return Err(Error::Empty("split has no questions or no tables".into()));
    }
    Ok(())
}

/// Encodes every table of the split and indexes the embeddings.
pub fn encode_tables(model: &Model, store: &EmbeddingStore, data: &SplitData) -> Result<VectorIndex> {
    model.check_store(store)?;
    let vectors = data
        .tables
        .par_iter()
        .map(|t| model.encode_table(store, t))
        .collect::<Result<Vec<_>>>()?;
    let ids: Vec<&str> = data.tables.iter().map(|t| t.id.as_str()).collect();
    VectorIndex::build(model.config.out_dim(), &ids, &vectors)
}

/// Rank of each question's gold table over the full split pool.
pub fn gold_ranks(model: &Model, store: &EmbeddingStore, data: &SplitData) -> Result<Vec<Option<usize>>> {
    require_nonempty(data)?;
    let index = encode_tables(model, store, data)?;
    let n = index.len();
    data.questions
        .par_iter()
        .map(|q| {
            let e = model.encode_question(store, &q.tokens)?;
            let hits = index.knn(&e, n)?;
            Ok(hits.iter().position(|h| h.id == q.table_id).map(|p| p + 1))
        })
        .collect()
}

pub fn mean_reciprocal_rank(model: &Model, store: &EmbeddingStore, data: &SplitData) -> Result<f64> {
    let ranks = gold_ranks(model, store, data)?;
    Ok(EvalReport::from_ranks(Split::Dev, data.tables.len(), &ranks, &[]).mrr)
}

/// Full-pool retrieval evaluation of `model` on one split.
pub fn evaluate(
    model: &Model,
    store: &EmbeddingStore,
    data: &SplitData,
    split: Split,
    ks: &[usize],
) -> Result<EvalReport> {
    if ks.contains(&0) {
        return Err(Error::Invalid("K values must be at least 1".into()));
    }
    let ranks = gold_ranks(model, store, data)?;
    let mut report = EvalReport::from_ranks(split, data.tables.len(), &ranks, ks);
    report.config_fingerprint = crate::checkpoint::config_fingerprint(&model.config);
    report.checkpoint_fingerprint = crate::checkpoint::model_fingerprint(model)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reciprocal_rank_examples() {
        let ranked = ["a", "b", "c"];
        assert_eq!(reciprocal_rank(&ranked, "a"), 1.0);
        assert_eq!(reciprocal_rank(&ranked, "c"), 1.0 / 3.0);
        assert_eq!(reciprocal_rank(&ranked, "z"), 0.0);
    }

    #[test]
    fn hit_at_k_examples() {
        let ranked: Vec<String> = (1..=8).map(|i| format!("t{i}")).collect();
        assert_eq!(hit_at_k(&ranked, "t7", 10), 1);
        assert_eq!(hit_at_k(&ranked, "t7", 5), 0);
        assert_eq!(hit_at_k(&ranked, "t1", 100), 1);
    }

    #[test]
    fn report_aggregation() {
        let ranks = [Some(1), Some(4), None, Some(2)];
        let r = EvalReport::from_ranks(Split::Test, 4, &ranks, &[1, 2, 5]);
        let expected_mrr = (1.0 + 0.25 + 0.0 + 0.5) / 4.0;
        assert!((r.mrr - expected_mrr).abs() < 1e-15);
        assert_eq!(r.hits[&1], 0.25);
        assert_eq!(r.hits[&2], 0.5);
        assert_eq!(r.hits[&5], 0.75);
        assert!(r.mrr >= r.hits[&1]);

        let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(json["mrr"], 43.75);
        assert_eq!(json["p_at_k"]["5"], 75.0);
        assert_eq!(json["split"], "test");
    }

    #[test]
    fn gold_last_of_four() {
        let r = EvalReport::from_ranks(Split::Dev, 4, &[Some(4)], &[1]);
        assert_eq!(r.mrr, 0.25);
    }
}
