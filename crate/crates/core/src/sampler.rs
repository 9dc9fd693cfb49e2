//! Training tuples: gold positives, hard negatives mined from frozen
//! question signatures, and random negatives.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Question;
use crate::error::{Error, Result};
use crate::index::{NearestNeighbors, VectorIndex};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Positive,
    Negative,
}

impl Label {
    /// File convention: 1 = positive, 0 = negative.
    pub fn as_int(self) -> u8 {
        match self {
            Label::Positive => 1,
            Label::Negative => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Gold,
    Hard,
    Random,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TrainTuple {
    pub question_id: String,
    pub table_id: String,
    pub label: Label,
    pub provenance: Provenance,
}

impl TrainTuple {
    fn negative(question: &Question, table_id: &str, provenance: Provenance) -> Self {
        TrainTuple {
            question_id: question.id.clone(),
            table_id: table_id.to_string(),
            label: Label::Negative,
            provenance,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    #[serde(rename = "random")]
    RandomOnly,
    #[serde(rename = "hard")]
    HardOnly,
    Both,
}

impl Strategy {
    pub fn uses_hard(self) -> bool {
        matches!(self, Strategy::HardOnly | Strategy::Both)
    }

    pub fn uses_random(self) -> bool {
        matches!(self, Strategy::RandomOnly | Strategy::Both)
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Strategy::RandomOnly),
            "hard" => Ok(Strategy::HardOnly),
            "both" => Ok(Strategy::Both),
            other => Err(Error::Invalid(format!("unknown strategy `{other}` (random|hard|both)"))),
        }
    }
}

fn require_two_tables(questions: &[Question]) -> Result<()> {
    let Some(first) = questions.first() else {
        return Err(Error::Empty("no questions to sample from".into()));
    };
    if questions.iter().all(|q| q.table_id == first.table_id) {
        return Err(Error::NoNegativeCandidate(first.table_id.clone()));
    }
    Ok(())
}

/// For every question, pairs its gold table with the nearest question (by
/// euclidean distance between signatures) that belongs to another table.
/// Ties go to the smaller question index.
pub fn mine_hard_negatives(questions: &[Question], signatures: &[Vec<f64>]) -> Result<Vec<TrainTuple>> {
    if signatures.len() != questions.len() {
        return Err(Error::DimensionMismatch {
            expected: questions.len(),
            found: signatures.len(),
            context: "one signature per question".into(),
        });
    }
    require_two_tables(questions)?;
    let n = questions.len();
    let dim = signatures[0].len();
    // Zero-padded positional ids make the index's id tie-break equal to the
    // question-index tie-break.
    let width = n.to_string().len();
    let ids: Vec<String> = (0..n).map(|i| format!("{i:0width$}")).collect();
    let index = VectorIndex::build(dim, &ids, signatures)?;

    (0..n)
        .into_par_iter()
        .map(|i| {
            let gold = &questions[i].table_id;
            let mut k = n.min(32);
            loop {
                let hits = index.knn(&signatures[i], k)?;
                let found = hits.iter().find_map(|h| {
                    let j: usize = h.id.parse().expect("positional id");
                    (questions[j].table_id != *gold).then_some(j)
                });
                if let Some(j) = found {
                    return Ok(TrainTuple::negative(&questions[j], gold, Provenance::Hard));
                }
                debug_assert!(k < n, "a different table exists");
                k = (2 * k).min(n);
            }
        })
        .collect()
}

/// For every question, draws one other question uniformly; emits a negative
/// only when the draw belongs to a different table. Failed draws are not
/// retried.
pub fn sample_random_negatives(questions: &[Question], seed: u64) -> Result<Vec<TrainTuple>> {
    let n = questions.len();
    if n < 2 {
        return Err(Error::Empty("random negatives need at least two questions".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (i, q) in questions.iter().enumerate() {
        let r = rng.gen_range(0..n - 1);
        let j = if r >= i { r + 1 } else { r };
        if questions[j].table_id != q.table_id {
            out.push(TrainTuple::negative(&questions[j], &q.table_id, Provenance::Random));
        }
    }
    Ok(out)
}

/// Gold positives plus negatives per `strategy`, shuffled with `seed`.
///
/// `signatures` must be aligned with `questions` when the strategy mines
/// hard negatives.
pub fn build_training_set(
    questions: &[Question],
    signatures: Option<&[Vec<f64>]>,
    strategy: Strategy,
    seed: u64,
) -> Result<Vec<TrainTuple>> {
    let mut tuples: Vec<TrainTuple> = questions
        .iter()
        .map(|q| TrainTuple {
            question_id: q.id.clone(),
            table_id: q.table_id.clone(),
            label: Label::Positive,
            provenance: Provenance::Gold,
        })
        .collect();
    if strategy.uses_hard() {
        let signatures = signatures.ok_or_else(|| Error::Invalid("hard negatives need question signatures".into()))?;
        tuples.extend(mine_hard_negatives(questions, signatures)?);
    }
    if strategy.uses_random() {
        require_two_tables(questions)?;
        tuples.extend(sample_random_negatives(questions, seed)?);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    tuples.shuffle(&mut rng);
    Ok(tuples)
}

/// Checks that every negative pairs a question with a table other than its
/// gold table. Returns the offending tuples.
pub fn invalid_negatives<'a>(tuples: &'a [TrainTuple], questions: &[Question]) -> Vec<&'a TrainTuple> {
    let gold: HashSet<(&str, &str)> = questions.iter().map(|q| (q.id.as_str(), q.table_id.as_str())).collect();
    tuples
        .iter()
        .filter(|t| t.label == Label::Negative && gold.contains(&(t.question_id.as_str(), t.table_id.as_str())))
        .collect()
}

#[derive(Serialize, Deserialize)]
struct TupleRecord {
    question_id: String,
    table_id: String,
    label: u8,
    provenance: Provenance,
}

pub fn write_tuples(path: impl AsRef<Path>, tuples: &[TrainTuple]) -> Result<()> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    for t in tuples {
        let rec = TupleRecord {
            question_id: t.question_id.clone(),
            table_id: t.table_id.clone(),
            label: t.label.as_int(),
            provenance: t.provenance,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_tuples(path: impl AsRef<Path>) -> Result<Vec<TrainTuple>> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| Error::Malformed {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let rec: TupleRecord = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        let label = match rec.label {
            1 => Label::Positive,
            0 => Label::Negative,
            other => return Err(malformed(format!("label must be 0 or 1, got {other}"))),
        };
        if (label == Label::Positive) != (rec.provenance == Provenance::Gold) {
            return Err(malformed(
                "positive tuples must have gold provenance and vice versa".into(),
            ));
        }
        out.push(TrainTuple {
            question_id: rec.question_id,
            table_id: rec.table_id,
            label,
            provenance: rec.provenance,
        });
    }
    Ok(out)
}
