//! Multi-head relation attention with residual aggregation.
//!
//! For a query `q` and key set `K`, head `m` computes
//!
//! ```text
//! S_m(q, k)  = <Wq_m q, Wk_m k> / sqrt(d_s)
//! w_m(q, k_j) = softmax_j S_m(q, k_j)
//! r_m(q)      = sum_j w_m(q, k_j) * Wv_m k_j
//! ```
//!
//! and the enhanced feature is `q + concat_m r_m(q)`. Stacked enhancement
//! alternates a transform `h(x) = relu(Hw x + Hb)` with that update, reusing
//! the same key set at every stage.
//!
//! The hot path projects every key once per head ([`PreparedKeys`]) and then
//! serves any number of queries. [`geo_reference`] recomputes everything from
//! scratch with plain loops and exists to check the fast path.

use std::io::{Read, Write};

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::types::{dot, FeatureVector, KeySet, SeededRng};

const MAGIC: &[u8; 4] = b"GEO1";

/// Denominator used to temper similarity logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SimilarityScale {
    /// `sqrt(d / M)`.
    #[default]
    PerHead,
    /// `sqrt(d)`.
    Full,
}

/// What enhancement does when the key set is empty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EmptyKeyBehavior {
    /// Relation feature is zero, so the query passes through unchanged.
    #[default]
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GeoConfig {
    pub n_geo: usize,
    pub empty_key_behavior: EmptyKeyBehavior,
}

impl GeoConfig {
    pub fn new(n_geo: usize) -> Result<Self> {
        if n_geo == 0 {
            return Err(Error::InvalidConfig("n_geo must be at least 1".into()));
        }
        Ok(Self {
            n_geo,
            empty_key_behavior: EmptyKeyBehavior::Identity,
        })
    }
}

/// Projection and transform weights. Matrices are row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GeoParams {
    dim: usize,
    heads: usize,
    head_dim: usize,
    /// Per head, `head_dim x dim`.
    w_q: Vec<Vec<f64>>,
    w_k: Vec<Vec<f64>>,
    w_v: Vec<Vec<f64>>,
    /// `dim x dim`.
    h_w: Vec<f64>,
    h_b: Vec<f64>,
    scale: SimilarityScale,
}

fn check_finite(name: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("{name} has non-finite entries")))
    }
}

fn identity(dim: usize) -> Vec<f64> {
    let mut m = vec![0.0; dim * dim];
    for i in 0..dim {
        m[i * dim + i] = 1.0;
    }
    m
}

/// Rows `[head*head_dim, (head+1)*head_dim)` of `gain * I_dim`.
fn identity_slice(dim: usize, head_dim: usize, head: usize, gain: f64) -> Vec<f64> {
    let mut m = vec![0.0; head_dim * dim];
    for r in 0..head_dim {
        m[r * dim + head * head_dim + r] = gain;
    }
    m
}

#[inline]
fn matvec_into(mat: &[f64], cols: usize, x: &[f64], out: &mut [f64]) {
    for (o, row) in out.iter_mut().zip(mat.chunks_exact(cols)) {
        *o = dot(row, x);
    }
}

fn check_dims(dim: usize, heads: usize) -> Result<usize> {
    if dim == 0 || heads == 0 {
        return Err(Error::InvalidConfig("dim and heads must be positive".into()));
    }
    if !dim.is_multiple_of(heads) {
        return Err(Error::InvalidConfig(format!(
            "dim {dim} is not divisible by {heads} heads"
        )));
    }
    Ok(dim / heads)
}

impl GeoParams {
    /// Builds parameters from explicit matrices, validating every shape.
    pub fn from_parts(
        dim: usize,
        heads: usize,
        w_q: Vec<Vec<f64>>,
        w_k: Vec<Vec<f64>>,
        w_v: Vec<Vec<f64>>,
        h_w: Vec<f64>,
        h_b: Vec<f64>,
    ) -> Result<Self> {
        let head_dim = check_dims(dim, heads)?;
        for (name, set) in [("w_q", &w_q), ("w_k", &w_k), ("w_v", &w_v)] {
            if set.len() != heads {
                return Err(Error::InvalidConfig(format!(
                    "{name} has {} heads, expected {heads}",
                    set.len()
                )));
            }
            for m in set {
                if m.len() != head_dim * dim {
                    return Err(Error::InvalidConfig(format!(
                        "{name} head has {} entries, expected {}",
                        m.len(),
                        head_dim * dim
                    )));
                }
                check_finite(name, m)?;
            }
        }
        if h_w.len() != dim * dim || h_b.len() != dim {
            return Err(Error::InvalidConfig("transform shape mismatch".into()));
        }
        check_finite("h_w", &h_w)?;
        check_finite("h_b", &h_b)?;
        Ok(Self {
            dim,
            heads,
            head_dim,
            w_q,
            w_k,
            w_v,
            h_w,
            h_b,
            scale: SimilarityScale::default(),
        })
    }

    /// Projections uniform in `[-1/sqrt(d), 1/sqrt(d)]`; transform is identity.
    pub fn random(dim: usize, heads: usize, rng: &mut SeededRng) -> Result<Self> {
        let head_dim = check_dims(dim, heads)?;
        let bound = 1.0 / (dim as f64).sqrt();
        let draw = |rng: &mut SeededRng| -> Vec<Vec<f64>> {
            (0..heads)
                .map(|_| {
                    (0..head_dim * dim)
                        .map(|_| rng.random_range(-bound..=bound))
                        .collect()
                })
                .collect()
        };
        let w_q = draw(rng);
        let w_k = draw(rng);
        let w_v = draw(rng);
        Self::from_parts(dim, heads, w_q, w_k, w_v, identity(dim), vec![0.0; dim])
    }

    /// Prescribed weights: query and key projections are the head's slice of
    /// `sqrt(qk_gain) * I`, values the slice of `value_gain * I`.
    ///
    /// Each head then compares the queries and keys on its own coordinate
    /// block and returns the attention-weighted key block scaled by
    /// `value_gain`, which pulls queries toward the keys they resemble.
    pub fn identity_slices(dim: usize, heads: usize, qk_gain: f64, value_gain: f64) -> Result<Self> {
        let head_dim = check_dims(dim, heads)?;
        let g = qk_gain.sqrt();
        let slices = |gain: f64| -> Vec<Vec<f64>> {
            (0..heads)
                .map(|m| identity_slice(dim, head_dim, m, gain))
                .collect()
        };
        Self::from_parts(
            dim,
            heads,
            slices(g),
            slices(g),
            slices(value_gain),
            identity(dim),
            vec![0.0; dim],
        )
    }

    pub fn with_scale(mut self, scale: SimilarityScale) -> Self {
        self.scale = scale;
        self
    }

    pub fn with_transform(mut self, h_w: Vec<f64>, h_b: Vec<f64>) -> Result<Self> {
        if h_w.len() != self.dim * self.dim || h_b.len() != self.dim {
            return Err(Error::InvalidConfig("transform shape mismatch".into()));
        }
        check_finite("h_w", &h_w)?;
        check_finite("h_b", &h_b)?;
        self.h_w = h_w;
        self.h_b = h_b;
        Ok(self)
    }

    /// Replaces every value projection with zeros.
    pub fn with_zero_values(mut self) -> Self {
        for m in &mut self.w_v {
            m.iter_mut().for_each(|x| *x = 0.0);
        }
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn scale(&self) -> SimilarityScale {
        self.scale
    }

    pub fn w_q(&self, head: usize) -> &[f64] {
        &self.w_q[head]
    }

    pub fn w_k(&self, head: usize) -> &[f64] {
        &self.w_k[head]
    }

    pub fn w_v(&self, head: usize) -> &[f64] {
        &self.w_v[head]
    }

    pub fn h_w(&self) -> &[f64] {
        &self.h_w
    }

    pub fn h_b(&self) -> &[f64] {
        &self.h_b
    }

    /// `1 / sqrt(d_s)` for the configured scale.
    pub fn logit_scale(&self) -> f64 {
        let d = match self.scale {
            SimilarityScale::PerHead => self.head_dim,
            SimilarityScale::Full => self.dim,
        };
        1.0 / (d as f64).sqrt()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: x.len(),
            });
        }
        Ok(())
    }

    fn check_head(&self, head: usize) -> Result<()> {
        if head >= self.heads {
            return Err(Error::InvalidHead {
                head,
                heads: self.heads,
            });
        }
        Ok(())
    }

    fn check_keys(&self, keys: &KeySet) -> Result<()> {
        keys.elements()
            .iter()
            .try_for_each(|k| self.check_input(&k.feature))
    }

    /// `relu(Hw x + Hb)`.
    pub fn transform(&self, x: &FeatureVector) -> Result<FeatureVector> {
        self.check_input(x)?;
        let mut out = vec![0.0; self.dim];
        matvec_into(&self.h_w, self.dim, x, &mut out);
        for (o, b) in out.iter_mut().zip(&self.h_b) {
            *o = (*o + b).max(0.0);
        }
        FeatureVector::new(out)
    }

    /// Projects every key once per head.
    pub fn prepare(&self, keys: &KeySet) -> Result<PreparedKeys> {
        self.check_keys(keys)?;
        let n = keys.len();
        let dh = self.head_dim;
        let heads = (0..self.heads)
            .map(|m| {
                let mut k_proj = vec![0.0; n * dh];
                let mut v_proj = vec![0.0; n * dh];
                for (j, key) in keys.elements().iter().enumerate() {
                    matvec_into(&self.w_k[m], self.dim, &key.feature, &mut k_proj[j * dh..(j + 1) * dh]);
                    matvec_into(&self.w_v[m], self.dim, &key.feature, &mut v_proj[j * dh..(j + 1) * dh]);
                }
                HeadKeys { k_proj, v_proj }
            })
            .collect();
        Ok(PreparedKeys { len: n, heads })
    }

    /// Serializes to the `GEO1` little-endian layout.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.heads as u32).to_le_bytes())?;
        let mut put = |values: &[f64]| -> std::io::Result<()> {
            for v in values {
                w.write_all(&v.to_le_bytes())?;
            }
            Ok(())
        };
        for m in 0..self.heads {
            put(&self.w_q[m])?;
            put(&self.w_k[m])?;
            put(&self.w_v[m])?;
        }
        put(&self.h_w)?;
        put(&self.h_b)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("truncated header".into()))?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}")));
        }
        let mut word = [0u8; 4];
        let mut read_u32 = |r: &mut R| -> Result<usize> {
            r.read_exact(&mut word)
                .map_err(|_| Error::Format("truncated header".into()))?;
            Ok(u32::from_le_bytes(word) as usize)
        };
        let dim = read_u32(&mut r)?;
        let heads = read_u32(&mut r)?;
        let head_dim = check_dims(dim, heads).map_err(|e| Error::Format(e.to_string()))?;
        let read_block = |r: &mut R, n: usize| -> Result<Vec<f64>> {
            let mut bytes = vec![0u8; n * 8];
            r.read_exact(&mut bytes)
                .map_err(|_| Error::Format("truncated body".into()))?;
            Ok(bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };
        let (mut w_q, mut w_k, mut w_v) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..heads {
            w_q.push(read_block(&mut r, head_dim * dim)?);
            w_k.push(read_block(&mut r, head_dim * dim)?);
            w_v.push(read_block(&mut r, head_dim * dim)?);
        }
        let h_w = read_block(&mut r, dim * dim)?;
        let h_b = read_block(&mut r, dim)?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes".into()));
        }
        Self::from_parts(dim, heads, w_q, w_k, w_v, h_w, h_b)
    }
}

#[derive(Debug, Clone)]
struct HeadKeys {
    /// `len x head_dim`.
    k_proj: Vec<f64>,
    v_proj: Vec<f64>,
}

/// A key set projected by every head, ready to serve queries.
#[derive(Debug, Clone)]
pub struct PreparedKeys {
    len: usize,
    heads: Vec<HeadKeys>,
}

impl PreparedKeys {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// One enhancement stage: `q + concat_m r_m(q)`.
    pub fn enhance(&self, params: &GeoParams, q: &FeatureVector) -> Result<FeatureVector> {
        params.check_input(q)?;
        if self.len == 0 {
            return Ok(q.clone());
        }
        let dh = params.head_dim;
        let scale = params.logit_scale();
        let mut out = q.to_vec();
        let mut q_proj = vec![0.0; dh];
        let mut logits = vec![0.0; self.len];
        for (m, head) in self.heads.iter().enumerate() {
            matvec_into(&params.w_q[m], params.dim, q, &mut q_proj);
            for (l, k) in logits.iter_mut().zip(head.k_proj.chunks_exact(dh)) {
                *l = dot(&q_proj, k) * scale;
            }
            softmax_in_place(&mut logits);
            let slot = &mut out[m * dh..(m + 1) * dh];
            let mut relation = vec![0.0; dh];
            for (w, v) in logits.iter().zip(head.v_proj.chunks_exact(dh)) {
                for (r, x) in relation.iter_mut().zip(v) {
                    *r += w * x;
                }
            }
            for (o, r) in slot.iter_mut().zip(&relation) {
                *o += r;
            }
        }
        FeatureVector::new(out)
    }

    /// `n_geo` stages of `q <- enhance(h(q))`.
    pub fn stack(&self, params: &GeoParams, q: &FeatureVector, n_geo: usize) -> Result<FeatureVector> {
        let mut x = q.clone();
        for _ in 0..n_geo {
            x = self.enhance(params, &params.transform(&x)?)?;
        }
        Ok(x)
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    out
}

fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

/// Scaled dot-product similarity of `q` and `k` under one head.
pub fn similarity(q: &FeatureVector, k: &FeatureVector, params: &GeoParams, head: usize) -> Result<f64> {
    params.check_input(q)?;
    params.check_input(k)?;
    params.check_head(head)?;
    let mut qp = vec![0.0; params.head_dim];
    let mut kp = vec![0.0; params.head_dim];
    matvec_into(&params.w_q[head], params.dim, q, &mut qp);
    matvec_into(&params.w_k[head], params.dim, k, &mut kp);
    Ok(dot(&qp, &kp) * params.logit_scale())
}

/// Softmax over the key axis of the per-key similarities.
pub fn attention_weights(q: &FeatureVector, keys: &KeySet, params: &GeoParams, head: usize) -> Result<Vec<f64>> {
    if keys.is_empty() {
        return Err(Error::EmptyKeySet);
    }
    let logits = keys
        .elements()
        .iter()
        .map(|k| similarity(q, &k.feature, params, head))
        .collect::<Result<Vec<_>>>()?;
    Ok(softmax(&logits))
}

/// Attention-weighted sum of value-projected keys for one head.
pub fn relation_feature(q: &FeatureVector, keys: &KeySet, params: &GeoParams, head: usize) -> Result<Vec<f64>> {
    let weights = attention_weights(q, keys, params, head)?;
    let dh = params.head_dim;
    let mut out = vec![0.0; dh];
    let mut vp = vec![0.0; dh];
    for (w, k) in weights.iter().zip(keys.elements()) {
        matvec_into(&params.w_v[head], params.dim, &k.feature, &mut vp);
        for (o, v) in out.iter_mut().zip(&vp) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// Single enhancement stage. An empty key set returns `q` unchanged.
pub fn geo_enhance(q: &FeatureVector, keys: &KeySet, params: &GeoParams) -> Result<FeatureVector> {
    params.prepare(keys)?.enhance(params, q)
}

/// `config.n_geo` stages of `q <- geo_enhance(h(q), keys)`.
pub fn geo_stack(q: &FeatureVector, keys: &KeySet, params: &GeoParams, config: &GeoConfig) -> Result<FeatureVector> {
    if config.n_geo == 0 {
        return Err(Error::InvalidConfig("n_geo must be at least 1".into()));
    }
    params.prepare(keys)?.stack(params, q, config.n_geo)
}

/// Enhances many queries against one key set, optionally across threads.
pub fn enhance_batch(
    queries: &[FeatureVector],
    keys: &KeySet,
    params: &GeoParams,
    n_geo: usize,
    parallel: bool,
) -> Result<Vec<FeatureVector>> {
    if n_geo == 0 {
        return Ok(queries.to_vec());
    }
    let prepared = params.prepare(keys)?;
    if parallel {
        queries
            .par_iter()
            .map(|q| prepared.stack(params, q, n_geo))
            .collect()
    } else {
        queries
            .iter()
            .map(|q| prepared.stack(params, q, n_geo))
            .collect()
    }
}

/// Unoptimized single-stage enhancement: nested loops, nothing cached.
pub fn geo_reference(q: &FeatureVector, keys: &KeySet, params: &GeoParams) -> Result<FeatureVector> {
    let d = params.dim;
    if q.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: q.len(),
        });
    }
    let mut out: Vec<f64> = q.to_vec();
    if keys.is_empty() {
        return Ok(q.clone());
    }
    for k in keys.elements() {
        if k.feature.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: k.feature.len(),
            });
        }
    }
    let dh = params.head_dim;
    let denom = match params.scale {
        SimilarityScale::PerHead => (dh as f64).sqrt(),
        SimilarityScale::Full => (d as f64).sqrt(),
    };
    for m in 0..params.heads {
        let wq = &params.w_q[m];
        let wk = &params.w_k[m];
        let wv = &params.w_v[m];
        let mut sims = Vec::with_capacity(keys.len());
        for k in keys.elements() {
            let mut s = 0.0;
            for r in 0..dh {
                let mut qr = 0.0;
                let mut kr = 0.0;
                for c in 0..d {
                    qr += wq[r * d + c] * q[c];
                    kr += wk[r * d + c] * k.feature[c];
                }
                s += qr * kr;
            }
            sims.push(s / denom);
        }
        let mut max = f64::NEG_INFINITY;
        for &s in &sims {
            if s > max {
                max = s;
            }
        }
        let mut total = 0.0;
        for &s in &sims {
            total += (s - max).exp();
        }
        for r in 0..dh {
            let mut acc = 0.0;
            for (j, k) in keys.elements().iter().enumerate() {
                let w = (sims[j] - max).exp() / total;
                let mut v = 0.0;
                for c in 0..d {
                    v += wv[r * d + c] * k.feature[c];
                }
                acc += w * v;
            }
            out[m * dh + r] += acc;
        }
    }
    FeatureVector::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Level, ScoredFeature};
    use rand::seq::SliceRandom;
    use rand_distr::StandardNormal;

    fn fv(values: Vec<f64>) -> FeatureVector {
        FeatureVector::new(values).unwrap()
    }

    fn random_vec(rng: &mut SeededRng, d: usize) -> FeatureVector {
        fv((0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
    }

    fn key_set(features: Vec<FeatureVector>) -> KeySet {
        KeySet::from_features(
            features
                .into_iter()
                .map(|f| ScoredFeature::new(f, 0.5, 0, 0, Level::Instance).unwrap())
                .collect(),
        )
    }

    fn max_abs(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn similarity_of_zero_vectors_is_zero() {
        let mut rng = SeededRng::new(1);
        let p = GeoParams::random(8, 2, &mut rng).unwrap();
        let z = FeatureVector::zeros(8).unwrap();
        assert_eq!(similarity(&z, &z, &p, 1).unwrap(), 0.0);
    }

    #[test]
    fn identity_projection_similarity() {
        let d = 4;
        let p = GeoParams::identity_slices(d, 1, 1.0, 1.0).unwrap();
        let e1 = fv(vec![1.0, 0.0, 0.0, 0.0]);
        let s = similarity(&e1, &e1, &p, 0).unwrap();
        assert!((s - 1.0 / (d as f64).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn similarity_matches_double_loop() {
        let mut rng = SeededRng::new(2);
        let (d, heads) = (12, 3);
        let p = GeoParams::random(d, heads, &mut rng).unwrap();
        let q = random_vec(&mut rng, d);
        let k = random_vec(&mut rng, d);
        let dh = d / heads;
        for m in 0..heads {
            let (wq, wk) = (p.w_q(m), p.w_k(m));
            let mut s = 0.0;
            for r in 0..dh {
                let qr: f64 = (0..d).map(|c| wq[r * d + c] * q[c]).sum();
                let kr: f64 = (0..d).map(|c| wk[r * d + c] * k[c]).sum();
                s += qr * kr;
            }
            s /= (dh as f64).sqrt();
            assert!((similarity(&q, &k, &p, m).unwrap() - s).abs() < 1e-12);
        }
    }

    #[test]
    fn full_scale_uses_whole_dimension() {
        let d = 8;
        let p = GeoParams::identity_slices(d, 2, 1.0, 1.0)
            .unwrap()
            .with_scale(SimilarityScale::Full);
        let q = fv(vec![1.0; d]);
        // head 0 sees 4 ones on each side
        assert!((similarity(&q, &q, &p, 0).unwrap() - 4.0 / (d as f64).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn head_and_dimension_errors() {
        let mut rng = SeededRng::new(3);
        let p = GeoParams::random(8, 2, &mut rng).unwrap();
        let q = FeatureVector::zeros(8).unwrap();
        let bad = FeatureVector::zeros(4).unwrap();
        assert!(matches!(similarity(&q, &q, &p, 2), Err(Error::InvalidHead { .. })));
        assert!(matches!(
            similarity(&q, &bad, &p, 0),
            Err(Error::DimensionMismatch { expected: 8, found: 4 })
        ));
        assert!(matches!(
            geo_enhance(&bad, &KeySet::new(), &p),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            attention_weights(&q, &KeySet::new(), &p, 0),
            Err(Error::EmptyKeySet)
        ));
        assert!(GeoParams::random(10, 4, &mut rng).is_err());
    }

    #[test]
    fn singleton_weights_are_one() {
        let mut rng = SeededRng::new(4);
        let p = GeoParams::random(8, 2, &mut rng).unwrap();
        let q = random_vec(&mut rng, 8);
        let keys = key_set(vec![random_vec(&mut rng, 8)]);
        assert_eq!(attention_weights(&q, &keys, &p, 0).unwrap(), vec![1.0]);
    }

    #[test]
    fn equal_similarities_split_evenly() {
        let mut rng = SeededRng::new(5);
        let p = GeoParams::random(8, 2, &mut rng).unwrap();
        let q = random_vec(&mut rng, 8);
        let k = random_vec(&mut rng, 8);
        let keys = key_set(vec![k.clone(), k]);
        let w = attention_weights(&q, &keys, &p, 1).unwrap();
        assert_eq!(w, vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_ignores_constant_shift() {
        let logits = [0.3, -1.2, 2.5, 0.0];
        let shifted: Vec<f64> = logits.iter().map(|x| x + 17.25).collect();
        assert!(max_abs(&softmax(&logits), &softmax(&shifted)) <= 1e-12);
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let w = softmax(&[1e6, 1e6 - 1.0]);
        assert!(w.iter().all(|x| x.is_finite()));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn relation_of_singleton_is_value_projection() {
        let mut rng = SeededRng::new(6);
        let (d, heads) = (8, 2);
        let p = GeoParams::random(d, heads, &mut rng).unwrap();
        let q = random_vec(&mut rng, d);
        let k = random_vec(&mut rng, d);
        let keys = key_set(vec![k.clone()]);
        for m in 0..heads {
            let mut expected = vec![0.0; d / heads];
            matvec_into(p.w_v(m), d, &k, &mut expected);
            assert_eq!(relation_feature(&q, &keys, &p, m).unwrap(), expected);
        }
    }

    #[test]
    fn relation_of_identical_keys_is_fixed_point() {
        let mut rng = SeededRng::new(7);
        let p = GeoParams::random(8, 2, &mut rng).unwrap();
        let q = random_vec(&mut rng, 8);
        let k = random_vec(&mut rng, 8);
        let mut expected = vec![0.0; 4];
        matvec_into(p.w_v(0), 8, &k, &mut expected);
        for n in [1, 3, 9] {
            let keys = key_set(vec![k.clone(); n]);
            let r = relation_feature(&q, &keys, &p, 0).unwrap();
            assert!(max_abs(&r, &expected) < 1e-12);
        }
    }

    /// Independent computation of the full attention matrix for one head.
    fn relation_oracle(q: &FeatureVector, keys: &[FeatureVector], p: &GeoParams, m: usize) -> Vec<f64> {
        let d = p.dim();
        let dh = p.head_dim();
        let proj = |w: &[f64], x: &[f64]| -> Vec<f64> {
            (0..dh).map(|r| (0..d).map(|c| w[r * d + c] * x[c]).sum()).collect()
        };
        let qp = proj(p.w_q(m), q);
        let exps: Vec<f64> = keys
            .iter()
            .map(|k| {
                let kp = proj(p.w_k(m), k);
                let s: f64 = qp.iter().zip(&kp).map(|(a, b)| a * b).sum();
                (s / (dh as f64).sqrt()).exp()
            })
            .collect();
        let total: f64 = exps.iter().sum();
        let mut out = vec![0.0; dh];
        for (e, k) in exps.iter().zip(keys) {
            let vp = proj(p.w_v(m), k);
            for r in 0..dh {
                out[r] += e / total * vp[r];
            }
        }
        out
    }

    #[test]
    fn relation_matches_oracle_on_random_instance() {
        let mut rng = SeededRng::new(8);
        let (d, heads) = (8, 2);
        let p = GeoParams::random(d, heads, &mut rng).unwrap();
        let q = random_vec(&mut rng, d);
        let raw: Vec<FeatureVector> = (0..7).map(|_| random_vec(&mut rng, d)).collect();
        let keys = key_set(raw.clone());
        for m in 0..heads {
            let got = relation_feature(&q, &keys, &p, m).unwrap();
            assert!(max_abs(&got, &relation_oracle(&q, &raw, &p, m)) <= 1e-6);
        }
    }

    #[test]
    fn empty_keys_return_query_bitwise() {
        let mut rng = SeededRng::new(9);
        let p = GeoParams::random(8, 4, &mut rng).unwrap();
        let q = random_vec(&mut rng, 8);
        let out = geo_enhance(&q, &KeySet::new(), &p).unwrap();
        assert!(out.iter().zip(q.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(geo_reference(&q, &KeySet::new(), &p).unwrap(), q);
    }

    #[test]
    fn zero_values_leave_query_unchanged() {
        let mut rng = SeededRng::new(10);
        let p = GeoParams::random(8, 1, &mut rng).unwrap().with_zero_values();
        let q = random_vec(&mut rng, 8);
        let keys = key_set(vec![random_vec(&mut rng, 8)]);
        assert_eq!(geo_enhance(&q, &keys, &p).unwrap(), q);
    }

    #[test]
    fn key_order_does_not_matter() {
        let mut rng = SeededRng::new(11);
        let p = GeoParams::random(16, 4, &mut rng).unwrap();
        let q = random_vec(&mut rng, 16);
        let keys = key_set((0..20).map(|_| random_vec(&mut rng, 16)).collect());
        let base = geo_enhance(&q, &keys, &p).unwrap();
        let mut order: Vec<usize> = (0..keys.len()).collect();
        order.shuffle(&mut rng);
        let shuffled = geo_enhance(&q, &keys.permuted(&order), &p).unwrap();
        assert!(max_abs(&base, &shuffled) <= 1e-12);
    }

    #[test]
    fn reference_singleton_closed_form() {
        let mut rng = SeededRng::new(12);
        let (d, heads) = (8, 4);
        let p = GeoParams::random(d, heads, &mut rng).unwrap();
        let q = random_vec(&mut rng, d);
        let k = random_vec(&mut rng, d);
        let keys = key_set(vec![k.clone()]);
        let mut expected = q.to_vec();
        for m in 0..heads {
            let mut v = vec![0.0; 2];
            matvec_into(p.w_v(m), d, &k, &mut v);
            expected[m * 2] += v[0];
            expected[m * 2 + 1] += v[1];
        }
        assert!(max_abs(&geo_reference(&q, &keys, &p).unwrap(), &expected) < 1e-12);
        assert!(max_abs(&geo_enhance(&q, &keys, &p).unwrap(), &expected) < 1e-12);
    }

    #[test]
    fn stack_identity_chain() {
        let mut rng = SeededRng::new(13);
        let p = GeoParams::random(4, 2, &mut rng).unwrap();
        let q = fv(vec![0.5, 0.0, 2.0, 1.5]);
        let cfg = GeoConfig::new(1).unwrap();
        assert_eq!(geo_stack(&q, &KeySet::new(), &p, &cfg).unwrap(), q);
    }

    #[test]
    fn stack_applies_relu_first() {
        let mut rng = SeededRng::new(14);
        let p = GeoParams::random(4, 2, &mut rng).unwrap();
        let q = fv(vec![-0.5, 1.0, -2.0, 1.5]);
        let cfg = GeoConfig::new(1).unwrap();
        let out = geo_stack(&q, &KeySet::new(), &p, &cfg).unwrap();
        assert_eq!(out.as_slice(), &[0.0, 1.0, 0.0, 1.5]);
    }

    #[test]
    fn stack_of_two_equals_unrolled_steps() {
        let mut rng = SeededRng::new(15);
        let d = 8;
        let h_w: Vec<f64> = (0..d * d).map(|_| rng.random_range(-0.4..0.4)).collect();
        let h_b: Vec<f64> = (0..d).map(|_| rng.random_range(-0.1..0.1)).collect();
        let p = GeoParams::random(d, 2, &mut rng)
            .unwrap()
            .with_transform(h_w, h_b)
            .unwrap();
        let q = random_vec(&mut rng, d);
        let keys = key_set((0..5).map(|_| random_vec(&mut rng, d)).collect());
        let stacked = geo_stack(&q, &keys, &p, &GeoConfig::new(2).unwrap()).unwrap();
        let step1 = geo_reference(&p.transform(&q).unwrap(), &keys, &p).unwrap();
        let step2 = geo_reference(&p.transform(&step1).unwrap(), &keys, &p).unwrap();
        assert!(max_abs(&stacked, &step2) < 1e-9);
        assert_eq!(stacked.dim(), d);
    }

    #[test]
    fn zero_depth_is_rejected() {
        assert!(GeoConfig::new(0).is_err());
    }

    #[test]
    fn batch_parallel_matches_serial() {
        let mut rng = SeededRng::new(16);
        let p = GeoParams::random(16, 4, &mut rng).unwrap();
        let keys = key_set((0..12).map(|_| random_vec(&mut rng, 16)).collect());
        let qs: Vec<FeatureVector> = (0..9).map(|_| random_vec(&mut rng, 16)).collect();
        let a = enhance_batch(&qs, &keys, &p, 2, false).unwrap();
        let b = enhance_batch(&qs, &keys, &p, 2, true).unwrap();
        assert_eq!(a, b);
        assert_eq!(enhance_batch(&qs, &keys, &p, 0, false).unwrap(), qs);
    }

    #[test]
    fn binary_round_trip_and_layout() {
        let mut rng = SeededRng::new(17);
        let p = GeoParams::random(8, 2, &mut rng).unwrap();
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        let floats = 3 * 8 * 8 + 8 * 8 + 8;
        assert_eq!(buf.len(), 12 + floats * 8);
        assert_eq!(&buf[..4], b"GEO1");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 8);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 2);
        // First float is W_Q^0[0][0].
        assert_eq!(f64::from_le_bytes(buf[12..20].try_into().unwrap()), p.w_q(0)[0]);
        // W_K^0 follows W_Q^0.
        let off = 12 + 4 * 8 * 8;
        assert_eq!(f64::from_le_bytes(buf[off..off + 8].try_into().unwrap()), p.w_k(0)[0]);
        assert_eq!(GeoParams::read_from(&buf[..]).unwrap(), p);
    }

    #[test]
    fn binary_rejects_garbage() {
        assert!(matches!(GeoParams::read_from(&b"GEO2"[..]), Err(Error::Format(_))));
        let mut rng = SeededRng::new(18);
        let mut buf = Vec::new();
        GeoParams::random(4, 2, &mut rng).unwrap().write_to(&mut buf).unwrap();
        assert!(GeoParams::read_from(&buf[..buf.len() - 1]).is_err());
        buf.push(0);
        assert!(GeoParams::read_from(&buf[..]).is_err());
    }
}
