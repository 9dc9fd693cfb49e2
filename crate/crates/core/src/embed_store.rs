//! Pretrained word vectors plus the two reserved rows (`UNK`, `<REAL>`).
//!
//! The text format is one `token v1 .. vD` record per line, optionally
//! preceded by a `count dim` header line.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::corpus::{Question, REAL_TOKEN};
use crate::error::{Error, Result};

/// Where a token's word vector comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenSlot {
    Pretrained(usize),
    Unk,
    Real,
}

#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    dim: usize,
    vocab: HashMap<String, usize>,
    /// Row-major `(V + 2) x dim`; the last two rows are UNK and REAL.
    matrix: Vec<f32>,
    duplicates: usize,
}

impl EmbeddingStore {
    /// Builds a store from in-memory vectors. Later duplicates of a token are
    /// ignored and counted.
    pub fn from_vectors<I, S>(dim: usize, entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Vec<f32>)>,
        S: Into<String>,
    {
        if dim == 0 {
            return Err(Error::Invalid("embedding dimension must be positive".into()));
        }
        let mut vocab = HashMap::new();
        let mut matrix = Vec::new();
        let mut duplicates = 0;
        for (token, vector) in entries {
            let token = token.into();
            if vector.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: vector.len(),
                    context: format!("vector for `{token}`"),
                });
            }
            if let Some(i) = vector.iter().position(|v| !v.is_finite()) {
                return Err(Error::Invalid(format!("non-finite entry {i} in vector for `{token}`")));
            }
            if vocab.contains_key(&token) {
                duplicates += 1;
                continue;
            }
            vocab.insert(token, vocab.len());
            matrix.extend_from_slice(&vector);
        }
        matrix.resize(matrix.len() + 2 * dim, 0.0);
        Ok(EmbeddingStore {
            dim,
            vocab,
            matrix,
            duplicates,
        })
    }

    /// Loads a whitespace-separated word-vector text file.
    ///
    /// When `expected_dim` is `None` the dimension is taken from the header
    /// or the first record.
    pub fn load(path: impl AsRef<Path>, expected_dim: Option<usize>) -> Result<Self> {
        let path = path.as_ref();
        let reader = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
        let mut dim = expected_dim;
        let mut entries = Vec::new();
        let mut first = true;
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let mut fields = line.split_whitespace();
            let Some(token) = fields.next() else { continue };
            let rest: Vec<&str> = fields.collect();
            if std::mem::take(&mut first) && rest.len() == 1 {
                if let (Ok(_), Ok(d)) = (token.parse::<usize>(), rest[0].parse::<usize>()) {
                    match dim {
                        Some(e) if e != d => {
                            return Err(Error::DimensionMismatch {
                                expected: e,
                                found: d,
                                context: format!("{} header", path.display()),
                            })
                        }
                        _ => dim = Some(d),
                    }
                    continue;
                }
            }
            let d = *dim.get_or_insert(rest.len());
            if rest.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: rest.len(),
                    context: format!("{}:{}", path.display(), i + 1),
                });
            }
            let vector = rest
                .iter()
                .map(|s| s.parse::<f32>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Malformed {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: e.to_string(),
                })?;
            entries.push((token.to_string(), vector));
        }
        if entries.is_empty() {
            return Err(Error::Empty(format!("no vectors in {}", path.display())));
        }
        let store = Self::from_vectors(dim.unwrap_or_default(), entries)?;
        if store.duplicates > 0 {
            log::warn!(
                "{}: {} duplicate tokens ignored (first occurrence kept)",
                path.display(),
                store.duplicates
            );
        }
        Ok(store)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of pretrained tokens (special rows excluded).
    pub fn vocab_len(&self) -> usize {
        self.vocab.len()
    }

    /// Number of duplicate token lines skipped at load.
    pub fn duplicates(&self) -> usize {
        self.duplicates
    }

    pub fn unk_row(&self) -> usize {
        self.vocab.len()
    }

    pub fn real_row(&self) -> usize {
        self.vocab.len() + 1
    }

    pub fn resolve(&self, token: &str) -> TokenSlot {
        if token == REAL_TOKEN {
            TokenSlot::Real
        } else {
            self.vocab
                .get(token)
                .map_or(TokenSlot::Unk, |&i| TokenSlot::Pretrained(i))
        }
    }

    pub fn row(&self, index: usize) -> &[f32] {
        &self.matrix[index * self.dim..(index + 1) * self.dim]
    }

    pub fn lookup(&self, token: &str) -> &[f32] {
        match self.resolve(token) {
            TokenSlot::Pretrained(i) => self.row(i),
            TokenSlot::Unk => self.row(self.unk_row()),
            TokenSlot::Real => self.row(self.real_row()),
        }
    }
}

/// Writes vectors in the text format with a `count dim` header.
pub fn write_embeddings<'a, I>(path: impl AsRef<Path>, dim: usize, entries: I) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, &'a [f32])>,
{
    let path = path.as_ref();
    let entries: Vec<_> = entries.into_iter().collect();
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    let io = |e| Error::io(path, e);
    writeln!(w, "{} {}", entries.len(), dim).map_err(io)?;
    for (token, vector) in entries {
        write!(w, "{token}").map_err(io)?;
        for v in vector {
            write!(w, " {v}").map_err(io)?;
        }
        writeln!(w).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// `(Σ wᵢ vᵢ) / sqrt(Σ wᵢ²)`.
pub fn sqrtn_combine<V: AsRef<[f64]>>(vectors: &[V], weights: &[f64]) -> Result<Vec<f64>> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::Empty("sqrtn_combine over no vectors".into()))?;
    if weights.len() != vectors.len() {
        return Err(Error::DimensionMismatch {
            expected: vectors.len(),
            found: weights.len(),
            context: "sqrtn_combine weights".into(),
        });
    }
    let dim = first.as_ref().len();
    let norm_sq: f64 = weights.iter().map(|w| w * w).sum();
    if norm_sq == 0.0 {
        return Err(Error::Invalid("sqrtn_combine weights are all zero".into()));
    }
    let mut out = vec![0.0; dim];
    for (v, &w) in vectors.iter().zip(weights) {
        let v = v.as_ref();
        if v.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: v.len(),
                context: "sqrtn_combine vector".into(),
            });
        }
        for (o, x) in out.iter_mut().zip(v) {
            *o += w * x;
        }
    }
    let scale = norm_sq.sqrt();
    out.iter_mut().for_each(|o| *o /= scale);
    Ok(out)
}

/// Frozen-embedding sentence signature used for negative mining.
pub fn question_signature(store: &EmbeddingStore, question: &Question) -> Result<Vec<f64>> {
    let vectors: Vec<Vec<f64>> = question
        .tokens
        .iter()
        .map(|t| store.lookup(t).iter().map(|&x| f64::from(x)).collect())
        .collect();
    sqrtn_combine(&vectors, &vec![1.0; vectors.len()])
}

/// Signatures for a whole question list, in order.
pub fn question_signatures(store: &EmbeddingStore, questions: &[Question]) -> Result<Vec<Vec<f64>>> {
    questions.par_iter().map(|q| question_signature(store, q)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Split;
    use proptest::prelude::*;

    fn tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn load_appends_special_rows() {
        let f = tmp("cat 1 2 3\ndog 4 5 6\n");
        let s = EmbeddingStore::load(f.path(), Some(3)).unwrap();
        assert_eq!(s.vocab_len(), 2);
        assert_eq!(s.dim(), 3);
        assert_eq!(s.real_row(), 3);
        assert_eq!(s.lookup("dog"), &[4.0, 5.0, 6.0]);
        assert_eq!(s.lookup("<REAL>"), &[0.0; 3]);
        assert_eq!(s.resolve("<REAL>"), TokenSlot::Real);
        assert_eq!(s.resolve("zzzqq"), TokenSlot::Unk);
        assert_eq!(s.lookup("zzzqq"), s.row(s.unk_row()));
    }

    #[test]
    fn load_with_header_and_duplicates() {
        let f = tmp("3 2\na 0.5 1\nb 2 3\na 9 9\n");
        let s = EmbeddingStore::load(f.path(), None).unwrap();
        assert_eq!(s.vocab_len(), 2);
        assert_eq!(s.duplicates(), 1);
        assert_eq!(s.lookup("a"), &[0.5, 1.0]);
    }

    #[test]
    fn load_errors() {
        let f = tmp("cat 1.0 2.0\n");
        assert!(matches!(
            EmbeddingStore::load(f.path(), Some(3)),
            Err(Error::DimensionMismatch {
                expected: 3,
                found: 2,
                ..
            })
        ));
        let f = tmp("cat 1.0 two\n");
        assert!(matches!(
            EmbeddingStore::load(f.path(), None),
            Err(Error::Malformed { .. })
        ));
        let f = tmp("");
        assert!(matches!(EmbeddingStore::load(f.path(), None), Err(Error::Empty(_))));
    }

    #[test]
    fn sqrtn_examples() {
        let v = vec![vec![1.5, -2.0]];
        assert_eq!(sqrtn_combine(&v, &[1.0]).unwrap(), vec![1.5, -2.0]);

        let v = vec![vec![1.0, 2.0]; 4];
        assert_eq!(sqrtn_combine(&v, &[1.0; 4]).unwrap(), vec![2.0, 4.0]);

        let v = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]];
        let out = sqrtn_combine(&v, &[1.0; 3]).unwrap();
        let r3 = 3f64.sqrt();
        assert!((out[0] - 2.0 / r3).abs() < 1e-15 && (out[1] - 1.0 / r3).abs() < 1e-15);

        let empty: Vec<Vec<f64>> = vec![];
        assert!(sqrtn_combine(&empty, &[]).is_err());
        assert!(sqrtn_combine(&[vec![1.0]], &[0.0]).is_err());
    }

    proptest! {
        #[test]
        fn sqrtn_permutation_and_homogeneity(
            rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 1..8),
            alpha in -3.0f64..3.0,
        ) {
            let ones = vec![1.0; rows.len()];
            let base = sqrtn_combine(&rows, &ones).unwrap();
            let mut rev = rows.clone();
            rev.reverse();
            let permuted = sqrtn_combine(&rev, &ones).unwrap();
            let scaled: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|x| alpha * x).collect()).collect();
            let scaled = sqrtn_combine(&scaled, &ones).unwrap();
            for i in 0..3 {
                prop_assert!((base[i] - permuted[i]).abs() < 1e-9);
                prop_assert!((alpha * base[i] - scaled[i]).abs() < 1e-9);
            }
        }
    }

    fn question(tokens: &[&str]) -> Question {
        Question {
            id: "q".into(),
            raw_text: tokens.join(" "),
            tokens: tokens.iter().map(|s| s.to_string()).collect(),
            table_id: "t".into(),
            split: Split::Train,
        }
    }

    #[test]
    fn signature_examples() {
        let s = EmbeddingStore::from_vectors(2, [("a", vec![1.0, 2.0])]).unwrap();
        assert_eq!(question_signature(&s, &question(&["a"])).unwrap(), vec![1.0, 2.0]);
        let two = question_signature(&s, &question(&["a", "a"])).unwrap();
        let r2 = 2f64.sqrt();
        assert!((two[0] - r2).abs() < 1e-15 && (two[1] - 2.0 * r2).abs() < 1e-15);
        // UNK row is zero at load, so an all-OOV signature is zero.
        assert_eq!(
            question_signature(&s, &question(&["x", "y", "z"])).unwrap(),
            vec![0.0, 0.0]
        );
    }
}
