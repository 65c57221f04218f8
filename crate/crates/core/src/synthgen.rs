//! Seeded synthetic feature streams with tunable temporal redundancy.
//!
//! Feature slot `i` of a frame belongs to class `i mod n_classes` and follows a
//! stationary AR(1) process around its class centroid:
//!
//! ```text
//! x_0 = c + sigma * e_0
//! x_t = c + rho * (x_{t-1} - c) + sqrt(1 - rho^2) * sigma * e_t
//! ```
//!
//! so the deviation from the centroid has the same variance at every `t` and
//! lag-one correlation `rho`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::pipeline::FrameFeatures;
use crate::types::{FeatureVector, Level, ScoredFeature, SeededRng};

const CENTROID_STREAM: u64 = 0;
const PIXEL_STREAM: u64 = 1;
const INSTANCE_STREAM: u64 = 2;
const SCORE_STREAM: u64 = 3;
const EVAL_STREAM: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScoreModel {
    /// Independent `U(0, 1)` per feature.
    UniformRandom,
    /// One `U(0, 1)` base per frame plus `U(-spread, spread)` jitter, clamped.
    FrameCorrelated { spread: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamSpec {
    pub n_frames: usize,
    pub dim: usize,
    pub n_classes: usize,
    /// Centroids are `centroid_scale * N(0, I)`.
    pub centroid_scale: f64,
    pub pixel_per_frame: usize,
    pub instance_per_frame: usize,
    pub noise_sigma: f64,
    pub redundancy_rho: f64,
    pub score_model: ScoreModel,
    pub seed: u64,
}

impl Default for StreamSpec {
    fn default() -> Self {
        Self {
            n_frames: 32,
            dim: 64,
            n_classes: 10,
            centroid_scale: 0.5,
            pixel_per_frame: 100,
            instance_per_frame: 75,
            noise_sigma: 0.5,
            redundancy_rho: 0.9,
            score_model: ScoreModel::UniformRandom,
            seed: 0,
        }
    }
}

impl StreamSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.dim == 0 {
            return bad("dim must be positive");
        }
        if self.n_classes == 0 {
            return bad("n_classes must be positive");
        }
        if !(0.0..=1.0).contains(&self.redundancy_rho) {
            return bad("redundancy_rho must lie in [0, 1]");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be finite and non-negative");
        }
        if !(self.centroid_scale > 0.0 && self.centroid_scale.is_finite()) {
            return bad("centroid_scale must be finite and positive");
        }
        if let ScoreModel::FrameCorrelated { spread } = self.score_model {
            if !(spread >= 0.0 && spread.is_finite()) {
                return bad("score spread must be finite and non-negative");
            }
        }
        Ok(())
    }

    /// Class centroids, one per class. Pairwise distinct.
    pub fn centroids(&self) -> Result<Vec<FeatureVector>> {
        self.validate()?;
        let mut rng = SeededRng::with_stream(self.seed, CENTROID_STREAM);
        let centroids = (0..self.n_classes)
            .map(|_| {
                let v = (0..self.dim)
                    .map(|_| self.centroid_scale * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                FeatureVector::new(v)
            })
            .collect::<Result<Vec<_>>>()?;
        for (i, a) in centroids.iter().enumerate() {
            if centroids[..i].iter().any(|b| b == a) {
                return Err(Error::InvalidConfig("centroids are not pairwise distinct".into()));
            }
        }
        Ok(centroids)
    }
}

fn normal_vec(rng: &mut SeededRng, dim: usize, sigma: f64) -> Vec<f64> {
    (0..dim).map(|_| sigma * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Evolves one level's features across all frames.
fn level_track(spec: &StreamSpec, centroids: &[FeatureVector], count: usize, stream: u64) -> Vec<Vec<Vec<f64>>> {
    let mut rng = SeededRng::with_stream(spec.seed, stream);
    let rho = spec.redundancy_rho;
    let innovation = (1.0 - rho * rho).max(0.0).sqrt() * spec.noise_sigma;
    let mut deviations: Vec<Vec<f64>> = (0..count).map(|_| normal_vec(&mut rng, spec.dim, spec.noise_sigma)).collect();
    let mut frames = Vec::with_capacity(spec.n_frames);
    for t in 0..spec.n_frames {
        if t > 0 {
            for dev in deviations.iter_mut() {
                let e = normal_vec(&mut rng, spec.dim, innovation);
                for (d, e) in dev.iter_mut().zip(e) {
                    *d = rho * *d + e;
                }
            }
        }
        let frame = deviations
            .iter()
            .enumerate()
            .map(|(i, dev)| {
                let c = &centroids[i % spec.n_classes];
                c.iter().zip(dev).map(|(c, d)| c + d).collect()
            })
            .collect();
        frames.push(frame);
    }
    frames
}

/// Generates `n_frames` frames of pixel and instance features.
pub fn generate_stream(spec: &StreamSpec) -> Result<Vec<FrameFeatures>> {
    let centroids = spec.centroids()?;
    let pixels = level_track(spec, &centroids, spec.pixel_per_frame, PIXEL_STREAM);
    let instances = level_track(spec, &centroids, spec.instance_per_frame, INSTANCE_STREAM);
    let mut score_rng = SeededRng::with_stream(spec.seed, SCORE_STREAM);

    let mut out = Vec::with_capacity(spec.n_frames);
    for (t, (pix, ins)) in pixels.into_iter().zip(instances).enumerate() {
        let frame_index = t as u64;
        let base: f64 = score_rng.random();
        let next_score = |rng: &mut SeededRng| -> f64 {
            match spec.score_model {
                ScoreModel::UniformRandom => rng.random(),
                ScoreModel::FrameCorrelated { spread } => {
                    let jitter = if spread > 0.0 { rng.random_range(-spread..=spread) } else { 0.0 };
                    (base + jitter).clamp(0.0, 1.0)
                }
            }
        };
        let mut build = |values: Vec<Vec<f64>>, level: Level| -> Result<Vec<ScoredFeature>> {
            values
                .into_iter()
                .enumerate()
                .map(|(i, v)| {
                    let score = next_score(&mut score_rng);
                    ScoredFeature::new(
                        FeatureVector::new(v)?,
                        score,
                        frame_index,
                        (i % spec.n_classes) as u32,
                        level,
                    )
                })
                .collect()
        };
        let pixel_features = build(pix, Level::Pixel)?;
        let instance_features = build(ins, Level::Instance)?;
        out.push(FrameFeatures::new(frame_index, pixel_features, instance_features)?);
    }
    Ok(out)
}

/// Noisy copies of the class centroids with their generating labels.
///
/// Query `i` belongs to class `i mod n_classes`.
pub fn labeled_eval_set(spec: &StreamSpec, n_queries: usize, query_sigma: f64) -> Result<(Vec<ScoredFeature>, Vec<u32>)> {
    if !(query_sigma >= 0.0 && query_sigma.is_finite()) {
        return Err(Error::InvalidConfig("query_sigma must be finite and non-negative".into()));
    }
    let centroids = spec.centroids()?;
    let mut rng = SeededRng::with_stream(spec.seed, EVAL_STREAM);
    let mut queries = Vec::with_capacity(n_queries);
    let mut labels = Vec::with_capacity(n_queries);
    for i in 0..n_queries {
        let class = i % spec.n_classes;
        let noise = normal_vec(&mut rng, spec.dim, query_sigma);
        let v = centroids[class].iter().zip(noise).map(|(c, n)| c + n).collect();
        queries.push(ScoredFeature::new(FeatureVector::new(v)?, 1.0, 0, class as u32, Level::Instance)?);
        labels.push(class as u32);
    }
    Ok((queries, labels))
}
