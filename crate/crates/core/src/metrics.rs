//! Nearest-centroid evaluation used as a stand-in for detection accuracy.

use crate::types::FeatureVector;

/// Class whose centroid has the highest cosine similarity to `x`.
/// Ties go to the lower class id.
pub fn nearest_centroid(x: &FeatureVector, centroids: &[FeatureVector]) -> u32 {
    let mut best = 0;
    let mut best_cos = f64::NEG_INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let cos = x.cosine(c);
        if cos > best_cos {
            best_cos = cos;
            best = i;
        }
    }
    best as u32
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProxyMetrics {
    pub accuracy: f64,
    /// Mean cosine similarity between each query and its true class centroid.
    pub mean_cosine: f64,
}

pub fn evaluate(queries: &[FeatureVector], labels: &[u32], centroids: &[FeatureVector]) -> ProxyMetrics {
    assert_eq!(queries.len(), labels.len());
    if queries.is_empty() {
        return ProxyMetrics {
            accuracy: 0.0,
            mean_cosine: 0.0,
        };
    }
    let mut hits = 0usize;
    let mut cos = 0.0;
    for (q, &l) in queries.iter().zip(labels) {
        if nearest_centroid(q, centroids) == l {
            hits += 1;
        }
        cos += q.cosine(&centroids[l as usize]);
    }
    let n = queries.len() as f64;
    ProxyMetrics {
        accuracy: hits as f64 / n,
        mean_cosine: cos / n,
    }
}
