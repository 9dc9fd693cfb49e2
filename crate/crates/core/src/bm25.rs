//! Okapi BM25 over whole-table token bags.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::corpus::{tokenize, Split, SplitData, Table};
use crate::error::{Error, Result};
use crate::metrics::EvalReport;

pub const K1: f64 = 1.5;
pub const B: f64 = 0.75;
pub const EPSILON: f64 = 0.25;

/// Column-name tokens followed by every cell's tokens. Numeric cells are
/// kept as written.
pub fn table_document(table: &Table) -> Vec<String> {
    let mut doc: Vec<String> = table.column_names.iter().flat_map(|n| tokenize(n)).collect();
    for row in &table.rows {
        for cell in row {
            doc.extend(tokenize(cell));
        }
    }
    doc
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Bm25Hit {
    pub id: String,
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct Bm25Index {
    doc_ids: Vec<String>,
    positions: HashMap<String, usize>,
    doc_len: Vec<usize>,
    avg_len: f64,
    term_freqs: HashMap<String, HashMap<usize, usize>>,
    idf: HashMap<String, f64>,
    pub k1: f64,
    pub b: f64,
    pub epsilon: f64,
}

impl Bm25Index {
    pub fn build<S: AsRef<str>>(docs: &[(S, Vec<String>)]) -> Result<Self> {
        Self::with_params(docs, K1, B, EPSILON)
    }

    pub fn with_params<S: AsRef<str>>(docs: &[(S, Vec<String>)], k1: f64, b: f64, epsilon: f64) -> Result<Self> {
        let mut positions = HashMap::with_capacity(docs.len());
        let mut term_freqs: HashMap<String, HashMap<usize, usize>> = HashMap::new();
        for (i, (id, tokens)) in docs.iter().enumerate() {
            if positions.insert(id.as_ref().to_string(), i).is_some() {
                return Err(Error::DuplicateId(id.as_ref().to_string()));
            }
            for t in tokens {
                *term_freqs.entry(t.clone()).or_default().entry(i).or_default() += 1;
            }
        }
        let n = docs.len();
        let doc_len: Vec<usize> = docs.iter().map(|(_, t)| t.len()).collect();
        let avg_len = if n == 0 {
            0.0
        } else {
            doc_len.iter().sum::<usize>() as f64 / n as f64
        };

        let raw: HashMap<&String, f64> = term_freqs
            .iter()
            .map(|(t, postings)| {
                let df = postings.len() as f64;
                (t, ((n as f64 - df + 0.5) / (df + 0.5)).ln())
            })
            .collect();
        let positive: Vec<f64> = raw.values().copied().filter(|&v| v > 0.0).collect();
        let floor = if positive.is_empty() {
            0.0
        } else {
            epsilon * positive.iter().sum::<f64>() / positive.len() as f64
        };
        let idf = raw
            .into_iter()
            .map(|(t, v)| (t.clone(), if v < 0.0 { floor } else { v }))
            .collect();

        Ok(Bm25Index {
            doc_ids: docs.iter().map(|(id, _)| id.as_ref().to_string()).collect(),
            positions,
            doc_len,
            avg_len,
            term_freqs,
            idf,
            k1,
            b,
            epsilon,
        })
    }

    pub fn from_tables(tables: &[Table]) -> Result<Self> {
        let docs: Vec<(&str, Vec<String>)> = tables.iter().map(|t| (t.id.as_str(), table_document(t))).collect();
        Self::build(&docs)
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn avg_len(&self) -> f64 {
        self.avg_len
    }

    pub fn doc_freq(&self, term: &str) -> usize {
        self.term_freqs.get(term).map_or(0, HashMap::len)
    }

    /// IDF after the negative-value floor; 0 for unseen terms.
    pub fn idf(&self, term: &str) -> f64 {
        self.idf.get(term).copied().unwrap_or(0.0)
    }

    fn score_at(&self, query: &[String], doc: usize) -> f64 {
        let norm = self.k1 * (1.0 - self.b + self.b * self.doc_len[doc] as f64 / self.avg_len);
        query
            .iter()
            .filter_map(|t| {
                let tf = *self.term_freqs.get(t)?.get(&doc)? as f64;
                Some(self.idf(t) * tf * (self.k1 + 1.0) / (tf + norm))
            })
            // An empty f64 `sum` is -0.0, which `total_cmp` would order
            // before documents scoring +0.0.
            .fold(0.0, |acc, s| acc + s)
    }

    pub fn score(&self, query: &[String], doc_id: &str) -> Result<f64> {
        let doc = *self
            .positions
            .get(doc_id)
            .ok_or_else(|| Error::UnknownId(doc_id.to_string()))?;
        Ok(self.score_at(query, doc))
    }

    /// Every document, by descending score then ascending id.
    pub fn rank(&self, query: &[String]) -> Vec<Bm25Hit> {
        let mut hits: Vec<Bm25Hit> = (0..self.len())
            .map(|i| Bm25Hit {
                id: self.doc_ids[i].clone(),
                score: self.score_at(query, i),
            })
            .collect();
        hits.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.id.cmp(&b.id)));
        hits
    }
}

/// Full-pool BM25 retrieval evaluation of one split.
pub fn evaluate_bm25(data: &SplitData, split: Split, ks: &[usize]) -> Result<EvalReport> {
    if data.questions.is_empty() || data.tables.is_empty() {
        return Err(Error::Empty("split has no questions or no tables".into()));
    }
    let index = Bm25Index::from_tables(&data.tables)?;
    let ranks: Vec<Option<usize>> = data
        .questions
        .par_iter()
        .map(|q| {
            index
                .rank(&q.tokens)
                .iter()
                .position(|h| h.id == q.table_id)
                .map(|p| p + 1)
        })
        .collect();
    Ok(EvalReport::from_ranks(split, data.tables.len(), &ranks, ks))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::ColumnType;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn golden() -> Bm25Index {
        Bm25Index::build(&[("d1", toks("a a b")), ("d2", toks("a c"))]).unwrap()
    }

    #[test]
    fn golden_value() {
        let idx = golden();
        // N = 2, df(c) = 1: ln(1.5 / 1.5) = 0.
        assert_eq!(idx.score(&toks("c"), "d2").unwrap(), 0.0);
        assert_eq!(idx.avg_len(), 2.5);
        assert_eq!(idx.doc_freq("a"), 2);
    }

    #[test]
    fn floor_uses_mean_positive_idf() {
        let idx = Bm25Index::build(&[
            ("d1", toks("a x")),
            ("d2", toks("a y")),
            ("d3", toks("a z")),
            ("d4", toks("b")),
        ])
        .unwrap();
        let pos = (3.5f64 / 1.5).ln();
        assert!((idx.idf("x") - pos).abs() < 1e-12);
        // df(a) = 3: ln(1.5 / 3.5) < 0 is floored.
        assert!((idx.idf("a") - 0.25 * pos).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_score() {
        let idx = Bm25Index::build(&[("d1", toks("x x y")), ("d2", toks("y z")), ("d3", toks("w"))]).unwrap();
        let idf_x = (2.5f64 / 1.5).ln();
        let norm = 1.5 * (1.0 - 0.75 + 0.75 * 3.0 / 2.0);
        let expected = idf_x * 2.0 * 2.5 / (2.0 + norm);
        assert!((idx.score(&toks("x"), "d1").unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn unknown_doc_is_error() {
        assert!(matches!(golden().score(&toks("a"), "d9"), Err(Error::UnknownId(_))));
    }

    #[test]
    fn empty_query_ranks_by_id() {
        let idx = Bm25Index::build(&[("b", toks("q")), ("a", toks("r")), ("c", toks("s"))]).unwrap();
        let ids: Vec<_> = idx.rank(&[]).into_iter().map(|h| h.id).collect();
        assert_eq!(ids, ["a", "b", "c"]);
    }

    #[test]
    fn single_match_goes_first() {
        let idx = Bm25Index::build(&[("a", toks("p q")), ("b", toks("r s")), ("c", toks("t u"))]).unwrap();
        let hits = idx.rank(&toks("s"));
        assert_eq!(hits[0].id, "b");
        assert!(hits[0].score > 0.0);
        assert!(hits[1..].iter().all(|h| h.score == 0.0));
    }

    #[test]
    fn identical_documents_score_equally() {
        let idx = Bm25Index::build(&[("a", toks("p q q")), ("b", toks("p q q")), ("c", toks("r"))]).unwrap();
        for q in ["p", "q", "p r", "zz"] {
            assert_eq!(idx.score(&toks(q), "a").unwrap(), idx.score(&toks(q), "b").unwrap());
        }
    }

    #[test]
    fn document_keeps_raw_numbers() {
        let t = Table {
            id: "t".into(),
            column_names: vec!["City".into(), "Pop".into()],
            column_types: vec![ColumnType::Text, ColumnType::Real],
            rows: vec![vec!["York".into(), "1200".into()]],
        };
        assert_eq!(table_document(&t), ["city", "pop", "york", "1200"]);
        let empty = Table { rows: vec![], ..t };
        assert_eq!(table_document(&empty), ["city", "pop"]);
    }
}
