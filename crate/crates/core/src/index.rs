//! Exact nearest-neighbour search by euclidean distance.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};

const VECTORS_MAGIC: &[u8] = b"TSVEC1\n";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedHit {
    pub id: String,
    pub distance: f64,
}

/// Anything that can answer k-nearest-neighbour queries.
pub trait NearestNeighbors {
    fn dim(&self) -> usize;
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    /// The `min(k, len)` closest entries, ascending by distance then id.
    fn knn(&self, query: &[f64], k: usize) -> Result<Vec<RankedHit>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    dim: usize,
    ids: Vec<String>,
    data: Vec<f64>,
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

impl VectorIndex {
    pub fn build<S, V>(dim: usize, ids: &[S], vectors: &[V]) -> Result<Self>
    where
        S: AsRef<str>,
        V: AsRef<[f64]>,
    {
        if ids.len() != vectors.len() {
            return Err(Error::DimensionMismatch {
                expected: ids.len(),
                found: vectors.len(),
                context: "index ids vs vectors".into(),
            });
        }
        let mut seen = HashSet::with_capacity(ids.len());
        let mut data = Vec::with_capacity(dim * ids.len());
        for (id, v) in ids.iter().zip(vectors) {
            let id = id.as_ref();
            if !seen.insert(id) {
                return Err(Error::DuplicateId(id.to_string()));
            }
            let v = v.as_ref();
            if v.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: v.len(),
                    context: format!("vector `{id}`"),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Invalid(format!("vector `{id}` has non-finite entries")));
            }
            data.extend_from_slice(v);
        }
        Ok(VectorIndex {
            dim,
            ids: ids.iter().map(|s| s.as_ref().to_string()).collect(),
            data,
        })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = VectorsHeader {
            dim: self.dim,
            ids: self.ids.clone(),
        };
        let payload: Vec<f32> = self.data.iter().map(|&x| x as f32).collect();
        container::encode(VECTORS_MAGIC, &header, &payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, payload): (VectorsHeader, _) = container::decode(VECTORS_MAGIC, bytes)?;
        if payload.len() != header.dim * header.ids.len() {
            return Err(Error::Format(format!(
                "vector payload has {} values, header implies {}",
                payload.len(),
                header.dim * header.ids.len()
            )));
        }
        let vectors: Vec<Vec<f64>> = payload
            .chunks(header.dim.max(1))
            .map(|c| c.iter().map(|&x| f64::from(x)).collect())
            .collect();
        Self::build(header.dim, &header.ids, &vectors[..header.ids.len()])
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        container::write_file(path.as_ref(), &self.to_bytes()?)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&container::read_file(path.as_ref())?)
    }
}

#[derive(Serialize, Deserialize)]
struct VectorsHeader {
    dim: usize,
    ids: Vec<String>,
}

impl NearestNeighbors for VectorIndex {
    fn dim(&self) -> usize {
        self.dim
    }

    fn len(&self) -> usize {
        self.ids.len()
    }

    fn knn(&self, query: &[f64], k: usize) -> Result<Vec<RankedHit>> {
        if query.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: query.len(),
                context: "knn query".into(),
            });
        }
        if k == 0 {
            return Err(Error::Invalid("k must be at least 1".into()));
        }
        let mut scored: Vec<(f64, usize)> = (0..self.len()).map(|i| (euclidean(self.vector(i), query), i)).collect();
        let order = |a: &(f64, usize), b: &(f64, usize)| -> Ordering {
            a.0.total_cmp(&b.0).then_with(|| self.ids[a.1].cmp(&self.ids[b.1]))
        };
        let k = k.min(scored.len());
        if k < scored.len() {
            scored.select_nth_unstable_by(k, order);
            scored.truncate(k);
        }
        scored.sort_unstable_by(order);
        Ok(scored
            .into_iter()
            .map(|(distance, i)| RankedHit {
                id: self.ids[i].clone(),
                distance,
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> VectorIndex {
        VectorIndex::build(2, &["b", "a", "c"], &[vec![3.0, 4.0], vec![0.0, 0.0], vec![-3.0, 4.0]]).unwrap()
    }

    #[test]
    fn pythagorean_and_ties() {
        let idx = toy();
        let hits = idx.knn(&[0.0, 0.0], 2).unwrap();
        assert_eq!(
            hits[0],
            RankedHit {
                id: "a".into(),
                distance: 0.0
            }
        );
        assert_eq!(
            hits[1],
            RankedHit {
                id: "b".into(),
                distance: 5.0
            }
        );
        let all = idx.knn(&[0.0, 0.0], 10).unwrap();
        let ids: Vec<_> = all.iter().map(|h| h.id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
    }

    #[test]
    fn empty_and_errors() {
        let empty = VectorIndex::build::<&str, Vec<f64>>(3, &[], &[]).unwrap();
        assert!(empty.knn(&[0.0; 3], 5).unwrap().is_empty());
        assert!(matches!(
            VectorIndex::build(1, &["x", "x"], &[vec![0.0], vec![1.0]]),
            Err(Error::DuplicateId(_))
        ));
        assert!(matches!(toy().knn(&[0.0], 1), Err(Error::DimensionMismatch { .. })));
        assert!(toy().knn(&[0.0, 0.0], 0).is_err());
    }

    #[test]
    fn insertion_order_irrelevant() {
        let idx = toy();
        let rev = VectorIndex::build(2, &["c", "a", "b"], &[vec![-3.0, 4.0], vec![0.0, 0.0], vec![3.0, 4.0]]).unwrap();
        for q in [[1.0, 1.0], [0.0, 4.0], [-2.0, 0.5]] {
            assert_eq!(idx.knn(&q, 3).unwrap(), rev.knn(&q, 3).unwrap());
        }
    }

    #[test]
    fn sidecar_round_trip() {
        let idx = VectorIndex::build(2, &["x", "y"], &[vec![0.1, -0.2], vec![1.0 / 3.0, 7.5]]).unwrap();
        let bytes = idx.to_bytes().unwrap();
        assert!(bytes.starts_with(b"TSVEC1\n"));
        let back = VectorIndex::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert!(VectorIndex::from_bytes(b"nope").is_err());
    }
}
