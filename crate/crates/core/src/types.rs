//! Value types shared across the crate: feature vectors, scored memory
//! entries, key sets and the seeded generator every stochastic step draws from.

use std::fmt;
use std::ops::Deref;
use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A finite, non-empty `f64` vector.
///
/// Storage is reference counted so key sets and snapshots can share features
/// with the bank without copying them.
#[derive(Clone, PartialEq)]
pub struct FeatureVector(Arc<[f64]>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyVector);
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self(values.into()))
    }

    pub fn zeros(dim: usize) -> Result<Self> {
        Self::new(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.to_vec()
    }

    pub fn norm(&self) -> f64 {
        dot(&self.0, &self.0).sqrt()
    }

    /// Cosine similarity; zero when either side has zero norm.
    pub fn cosine(&self, other: &FeatureVector) -> f64 {
        let denom = self.norm() * other.norm();
        if denom == 0.0 {
            0.0
        } else {
            dot(&self.0, &other.0) / denom
        }
    }
}

impl Deref for FeatureVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl fmt::Debug for FeatureVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("FeatureVector").field(&&*self.0).finish()
    }
}

impl TryFrom<Vec<f64>> for FeatureVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl Serialize for FeatureVector {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.0.serialize(s)
    }
}

impl<'de> Deserialize<'de> for FeatureVector {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let values = Vec::<f64>::deserialize(d)?;
        FeatureVector::new(values).map_err(serde::de::Error::custom)
    }
}

/// Which enhancement stage a feature belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Pixel,
    Instance,
}

/// A feature together with the metadata the memory bank ranks and evicts by.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredFeature {
    pub feature: FeatureVector,
    score: f64,
    pub frame_index: u64,
    pub class_id: u32,
    pub level: Level,
}

impl ScoredFeature {
    pub fn new(
        feature: FeatureVector,
        score: f64,
        frame_index: u64,
        class_id: u32,
        level: Level,
    ) -> Result<Self> {
        // NaN fails the range check too.
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::ScoreOutOfRange(score));
        }
        Ok(Self {
            feature,
            score,
            frame_index,
            class_id,
            level,
        })
    }

    pub fn score(&self) -> f64 {
        self.score
    }

    pub fn dim(&self) -> usize {
        self.feature.dim()
    }

    /// Same metadata, different feature values.
    pub fn with_feature(&self, feature: FeatureVector) -> Self {
        Self {
            feature,
            ..self.clone()
        }
    }
}

/// Stable identifier of a memory bank slot. Ids are never reused.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SlotId(pub u64);

/// Features drawn from a bank, paired with the slots they came from.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeySet {
    elements: Vec<ScoredFeature>,
    source_slots: Vec<SlotId>,
}

impl KeySet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a key set from loose features with synthetic slot ids `0..n`.
    pub fn from_features(features: Vec<ScoredFeature>) -> Self {
        let source_slots = (0..features.len() as u64).map(SlotId).collect();
        Self {
            elements: features,
            source_slots,
        }
    }

    pub(crate) fn from_parts(elements: Vec<ScoredFeature>, source_slots: Vec<SlotId>) -> Self {
        debug_assert_eq!(elements.len(), source_slots.len());
        Self {
            elements,
            source_slots,
        }
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn elements(&self) -> &[ScoredFeature] {
        &self.elements
    }

    pub fn source_slots(&self) -> &[SlotId] {
        &self.source_slots
    }

    pub fn iter(&self) -> impl Iterator<Item = (SlotId, &ScoredFeature)> {
        self.source_slots.iter().copied().zip(self.elements.iter())
    }

    /// Shannon entropy (nats) of the source frames represented in the set.
    pub fn frame_entropy(&self) -> f64 {
        crate::bank::frame_entropy(self.elements.iter().map(|f| f.frame_index))
    }

    /// Reorders elements by `order[i]` = old position of new element `i`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            elements: order.iter().map(|&i| self.elements[i].clone()).collect(),
            source_slots: order.iter().map(|&i| self.source_slots[i]).collect(),
        }
    }
}

/// Deterministic generator: ChaCha8 seeded from a `u64`.
///
/// ChaCha output is specified bit-for-bit, so equal seeds replay the same
/// draws on every platform.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream for a sub-task, derived from `(seed, stream)`.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// Dot product with four independent accumulators so the loop vectorizes.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks_a = a.chunks_exact(4);
    let chunks_b = b.chunks_exact(4);
    let tail: f64 = chunks_a
        .remainder()
        .iter()
        .zip(chunks_b.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (ca, cb) in chunks_a.zip(chunks_b) {
        acc[0] += ca[0] * cb[0];
        acc[1] += ca[1] * cb[1];
        acc[2] += ca[2] * cb[2];
        acc[3] += ca[3] * cb[3];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}
