//! Embedding vectors and the similarity math used for compression,
//! retrieval, and graph construction.

use std::fmt;

use serde::de::{Deserializer, SeqAccess, Visitor};
use serde::ser::{SerializeSeq, Serializer};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A fixed-dimension real vector with its Euclidean norm cached at
/// construction. Serialized as the bare value array; the norm is recomputed
/// on load through the same summation, so round-trips are bit-exact.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding<S> {
    values: Vec<S>,
    norm: S,
}

impl<S: Scalar> Embedding<S> {
    pub fn new(values: Vec<S>) -> Self {
        let norm = values.iter().fold(S::zero(), |acc, v| acc + *v * *v).sqrt();
        Self { values, norm }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> S {
        self.norm
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }
}

impl<S: Scalar> Serialize for Embedding<S> {
    fn serialize<T: Serializer>(&self, serializer: T) -> std::result::Result<T::Ok, T::Error> {
        let mut seq = serializer.serialize_seq(Some(self.values.len()))?;
        for v in &self.values {
            seq.serialize_element(v)?;
        }
        seq.end()
    }
}

impl<'de, S: Scalar> Deserialize<'de> for Embedding<S> {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct VecVisitor<S>(std::marker::PhantomData<S>);
        impl<'de, S: Scalar> Visitor<'de> for VecVisitor<S> {
            type Value = Vec<S>;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                write!(f, "a sequence of floats")
            }
            fn visit_seq<A: SeqAccess<'de>>(
                self,
                mut seq: A,
            ) -> std::result::Result<Self::Value, A::Error> {
                let mut values = Vec::with_capacity(seq.size_hint().unwrap_or(0));
                while let Some(v) = seq.next_element::<S>()? {
                    values.push(v);
                }
                Ok(values)
            }
        }
        let values = deserializer.deserialize_seq(VecVisitor(std::marker::PhantomData))?;
        Ok(Embedding::new(values))
    }
}

/// Cosine similarity of two vectors, in [-1, 1].
pub fn cosine_similarity<S: Scalar>(a: &Embedding<S>, b: &Embedding<S>) -> Result<S> {
    if a.dim() != b.dim() {
        return Err(Error::DimMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    if a.norm() == S::zero() || b.norm() == S::zero() {
        return Err(Error::ZeroNorm);
    }
    let dot = a
        .values
        .iter()
        .zip(&b.values)
        .fold(S::zero(), |acc, (x, y)| acc + *x * *y);
    Ok(dot / (a.norm * b.norm))
}

/// Ids of the `k` items most similar to `query`, most similar first.
///
/// Ties break by ascending id so the selection is canonical under any input
/// permutation. If `k >= items.len()` all ids come back, sorted by
/// similarity.
pub fn top_k_by_similarity<S: Scalar, I: Ord + Clone>(
    query: &Embedding<S>,
    items: &[(I, Embedding<S>)],
    k: usize,
) -> Result<Vec<I>> {
    let mut scored: Vec<(S, &I)> = Vec::with_capacity(items.len());
    for (id, vec) in items {
        scored.push((cosine_similarity(query, vec)?, id));
    }
    // Norms are checked above, so similarities are finite and comparable.
    scored.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .expect("finite similarity")
            .then_with(|| a.1.cmp(b.1))
    });
    Ok(scored
        .into_iter()
        .take(k)
        .map(|(_, id)| id.clone())
        .collect())
}
