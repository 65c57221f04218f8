//! Experiment drivers behind the `mamba` subcommands.
//!
//! Each driver takes a plain options struct, returns typed rows, and can
//! render them as a CSV [`Table`].

use mamba_core::bank::{SamplingStrategy, Scope, UpdatePolicy};
use mamba_core::geo::enhance_batch;
use mamba_core::metrics::{evaluate, ProxyMetrics};
use mamba_core::timing::{summarize, timed, LatencySummary};
use mamba_core::{
    generate_stream, geo_reference, labeled_eval_set, BankConfig, FeatureVector, GeoParams, KeySet, Level,
    MemoryBank, Result, ScoreModel, ScoredFeature, SeededRng, StreamSpec,
};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::report::{cell, opt_cell, Table};

/// Features written per frame when a bank is pre-filled for timing.
const FILL_PER_FRAME: usize = 75;

fn normal_feature(rng: &mut SeededRng, dim: usize) -> Result<FeatureVector> {
    FeatureVector::new((0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
}

/// A bank of exactly `n_m` random features spread over consecutive frames.
pub fn filled_bank(n_m: usize, n_k: usize, dim: usize, strategy: SamplingStrategy, seed: u64) -> Result<MemoryBank> {
    let mut rng = SeededRng::with_stream(seed, 10);
    let config = BankConfig::new(n_m.max(1), n_k).strategy(strategy);
    let mut bank = MemoryBank::new(config)?;
    let mut frame = 0u64;
    let mut remaining = n_m;
    while remaining > 0 {
        let take = remaining.min(FILL_PER_FRAME);
        let batch = (0..take)
            .map(|_| {
                let f = normal_feature(&mut rng, dim)?;
                let score: f64 = rng.random();
                let class = rng.random_range(0..10u32);
                ScoredFeature::new(f, score, frame, class, Level::Instance)
            })
            .collect::<Result<Vec<_>>>()?;
        bank.insert_batch(batch, &mut rng)?;
        remaining -= take;
        frame += 1;
    }
    Ok(bank)
}

fn random_queries(n: usize, dim: usize, seed: u64) -> Result<Vec<FeatureVector>> {
    let mut rng = SeededRng::with_stream(seed, 11);
    (0..n).map(|_| normal_feature(&mut rng, dim)).collect()
}

/// Runs `f` `warmup + reps` times and summarizes the last `reps`.
fn measure(reps: usize, warmup: usize, mut f: impl FnMut() -> Result<()>) -> Result<LatencySummary> {
    let mut samples = Vec::with_capacity(reps);
    for i in 0..warmup + reps.max(1) {
        let (r, ns) = timed(&mut f);
        r?;
        if i >= warmup {
            samples.push(ns);
        }
    }
    Ok(summarize(&samples).expect("at least one sample"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyMode {
    Sampled,
    Concatenated,
}

impl KeyMode {
    pub fn name(self) -> &'static str {
        match self {
            KeyMode::Sampled => "sampled",
            KeyMode::Concatenated => "concat",
        }
    }
}

#[derive(Debug, Clone)]
pub struct RuntimeOptions {
    pub n_m_grid: Vec<usize>,
    pub n_k: usize,
    pub dim: usize,
    pub heads: usize,
    pub n_queries: usize,
    pub reps: usize,
    pub warmup: usize,
    /// Reps for concatenated key sets, which are far slower.
    pub concat_reps: usize,
    pub strategy: SamplingStrategy,
    /// Concatenated runs whose working set would exceed this are reported as OOM.
    pub memory_budget_bytes: u64,
    pub parallel: bool,
    pub seed: u64,
}

impl Default for RuntimeOptions {
    fn default() -> Self {
        Self {
            n_m_grid: vec![4_000, 8_000, 16_000, 32_000, 64_000],
            n_k: 256,
            dim: 256,
            heads: 8,
            n_queries: 64,
            reps: 7,
            warmup: 1,
            concat_reps: 3,
            strategy: SamplingStrategy::Random,
            memory_budget_bytes: 2 << 30,
            parallel: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RuntimeRow {
    pub mode: KeyMode,
    pub n_m: usize,
    pub n_k: usize,
    /// `None` when the run was skipped for exceeding the memory budget.
    pub latency: Option<LatencySummary>,
}

/// Bytes held while enhancing against `n_keys` keys: the projected keys and
/// values for every head.
pub fn attention_bytes(n_keys: usize, dim: usize) -> u64 {
    (n_keys as u64) * (dim as u64) * 2 * 8
}

/// Latency of one enhancement step (key-set construction plus attention) as
/// the bank grows, for sampled and concatenated key sets.
///
/// Sampled runs are interleaved across the grid, one rep per bank per round,
/// so slow drift in machine load spreads evenly over all bank sizes.
pub fn runtime_vs_nm(opts: &RuntimeOptions) -> Result<Vec<RuntimeRow>> {
    let mut rng = SeededRng::with_stream(opts.seed, 12);
    let params = GeoParams::random(opts.dim, opts.heads, &mut rng)?;
    let queries = random_queries(opts.n_queries, opts.dim, opts.seed)?;
    let banks = opts
        .n_m_grid
        .iter()
        .map(|&n_m| filled_bank(n_m, opts.n_k, opts.dim, opts.strategy, opts.seed))
        .collect::<Result<Vec<_>>>()?;
    let mut draw_rng = SeededRng::with_stream(opts.seed, 13);
    let mut samples = vec![Vec::with_capacity(opts.reps); banks.len()];
    for round in 0..opts.warmup + opts.reps.max(1) {
        for (bank, out) in banks.iter().zip(samples.iter_mut()) {
            let (r, ns) = timed(|| {
                let keys = bank.construct_key_set(&mut draw_rng);
                enhance_batch(&queries, &keys, &params, 1, opts.parallel).map(drop)
            });
            r?;
            if round >= opts.warmup {
                out.push(ns);
            }
        }
    }
    let mut rows = Vec::new();
    for ((&n_m, bank), sampled) in opts.n_m_grid.iter().zip(&banks).zip(&samples) {
        rows.push(RuntimeRow {
            mode: KeyMode::Sampled,
            n_m,
            n_k: opts.n_k.min(n_m),
            latency: summarize(sampled),
        });
        let latency = if attention_bytes(n_m, opts.dim) > opts.memory_budget_bytes {
            None
        } else {
            Some(measure(opts.concat_reps, 0, || {
                let keys = bank.concat_key_set();
                enhance_batch(&queries, &keys, &params, 1, opts.parallel).map(drop)
            })?)
        };
        rows.push(RuntimeRow {
            mode: KeyMode::Concatenated,
            n_m,
            n_k: n_m,
            latency,
        });
    }
    Ok(rows)
}

pub fn runtime_table(rows: &[RuntimeRow], parallel: bool) -> Table {
    let mut t = Table::new(&["mode", "n_m", "n_k", "median_ns", "p90_ns", "status", "parallel"]);
    for r in rows {
        t.push(vec![
            cell(r.mode.name()),
            cell(r.n_m),
            cell(r.n_k),
            opt_cell(r.latency.map(|l| l.median_ns)),
            opt_cell(r.latency.map(|l| l.p90_ns)),
            cell(if r.latency.is_some() { "ok" } else { "oom" }),
            cell(parallel),
        ]);
    }
    t
}

#[derive(Debug, Clone)]
pub struct QualityOptions {
    pub dim: usize,
    pub heads: usize,
    pub n_classes: usize,
    pub query_sigma: f64,
    /// Value gain: the relation feature adds about `alpha` times the
    /// attended key to the query.
    pub alpha: f64,
    /// Query/key gain; larger values sharpen attention.
    pub qk_gain: f64,
    pub n_k: usize,
    pub exemplars_per_class: usize,
    pub n_queries: usize,
    pub seed: u64,
}

impl Default for QualityOptions {
    fn default() -> Self {
        Self {
            dim: 64,
            heads: 1,
            n_classes: 10,
            query_sigma: 0.5,
            alpha: 0.5,
            qk_gain: 4.0,
            n_k: 256,
            exemplars_per_class: 50,
            n_queries: 500,
            seed: 0,
        }
    }
}

/// Everything needed to evaluate, and to re-evaluate with another
/// implementation of the same attention.
#[derive(Debug, Clone)]
pub struct QualitySetup {
    pub params: GeoParams,
    pub keys: KeySet,
    pub queries: Vec<FeatureVector>,
    pub labels: Vec<u32>,
    pub centroids: Vec<FeatureVector>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QualityResult {
    pub n_k: usize,
    pub key_set_size: usize,
    pub raw: ProxyMetrics,
    pub enhanced: ProxyMetrics,
}

fn quality_spec(opts: &QualityOptions) -> StreamSpec {
    StreamSpec {
        dim: opts.dim,
        n_classes: opts.n_classes,
        seed: opts.seed,
        ..StreamSpec::default()
    }
}

/// Seeds a bank with clean centroid exemplars, draws a key set and noisy
/// labeled queries.
pub fn quality_setup(opts: &QualityOptions) -> Result<QualitySetup> {
    let spec = quality_spec(opts);
    let centroids = spec.centroids()?;
    let capacity = (opts.n_classes * opts.exemplars_per_class).max(1);
    let mut bank = MemoryBank::new(BankConfig::new(capacity, opts.n_k))?;
    let mut rng = SeededRng::with_stream(opts.seed, 20);
    for (class, c) in centroids.iter().enumerate() {
        let batch = (0..opts.exemplars_per_class)
            .map(|_| ScoredFeature::new(c.clone(), 1.0, class as u64, class as u32, Level::Instance))
            .collect::<Result<Vec<_>>>()?;
        if !batch.is_empty() {
            bank.insert_batch(batch, &mut rng)?;
        }
    }
    let keys = bank.construct_key_set(&mut rng);
    let (queries, labels) = labeled_eval_set(&spec, opts.n_queries, opts.query_sigma)?;
    let params = GeoParams::identity_slices(opts.dim, opts.heads, opts.qk_gain, opts.alpha)?;
    Ok(QualitySetup {
        params,
        keys,
        queries: queries.into_iter().map(|q| q.feature).collect(),
        labels,
        centroids,
    })
}

/// Scores a setup with the given single-stage enhancement.
pub fn evaluate_setup(
    setup: &QualitySetup,
    enhance: impl Fn(&FeatureVector) -> Result<FeatureVector>,
) -> Result<(ProxyMetrics, ProxyMetrics)> {
    let raw = evaluate(&setup.queries, &setup.labels, &setup.centroids);
    let enhanced = setup.queries.iter().map(enhance).collect::<Result<Vec<_>>>()?;
    Ok((raw, evaluate(&enhanced, &setup.labels, &setup.centroids)))
}

/// Nearest-centroid accuracy and cosine before and after one GEO stage.
pub fn quality_proxy(opts: &QualityOptions) -> Result<QualityResult> {
    let setup = quality_setup(opts)?;
    let prepared = setup.params.prepare(&setup.keys)?;
    let (raw, enhanced) = evaluate_setup(&setup, |q| prepared.enhance(&setup.params, q))?;
    Ok(QualityResult {
        n_k: opts.n_k,
        key_set_size: setup.keys.len(),
        raw,
        enhanced,
    })
}

/// Same as [`quality_proxy`] but through the unoptimized reference.
pub fn quality_proxy_reference(opts: &QualityOptions) -> Result<QualityResult> {
    let setup = quality_setup(opts)?;
    let (raw, enhanced) = evaluate_setup(&setup, |q| geo_reference(q, &setup.keys, &setup.params))?;
    Ok(QualityResult {
        n_k: opts.n_k,
        key_set_size: setup.keys.len(),
        raw,
        enhanced,
    })
}

pub fn quality_table(results: &[QualityResult]) -> Table {
    let mut t = Table::new(&[
        "n_k",
        "keyset_size",
        "raw_accuracy",
        "enhanced_accuracy",
        "raw_cosine",
        "enhanced_cosine",
    ]);
    for r in results {
        t.push(vec![
            cell(r.n_k),
            cell(r.key_set_size),
            cell(r.raw.accuracy),
            cell(r.enhanced.accuracy),
            cell(r.raw.mean_cosine),
            cell(r.enhanced.mean_cosine),
        ]);
    }
    t
}

#[derive(Debug, Clone)]
pub struct NkSweepOptions {
    pub n_k_grid: Vec<usize>,
    pub timing: RuntimeOptions,
    /// Bank size for the timing half of the sweep.
    pub n_m: usize,
    pub quality: QualityOptions,
}

impl Default for NkSweepOptions {
    fn default() -> Self {
        Self {
            n_k_grid: vec![0, 32, 128, 512, 2048],
            timing: RuntimeOptions::default(),
            n_m: 16_000,
            quality: QualityOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NkRow {
    pub n_k: usize,
    pub latency: LatencySummary,
    pub quality: QualityResult,
}

/// Sampled-mode latency and quality proxy as the key set grows.
pub fn nk_sweep(opts: &NkSweepOptions) -> Result<Vec<NkRow>> {
    let t = &opts.timing;
    let mut rng = SeededRng::with_stream(t.seed, 12);
    let params = GeoParams::random(t.dim, t.heads, &mut rng)?;
    let queries = random_queries(t.n_queries, t.dim, t.seed)?;
    let bank = filled_bank(opts.n_m, 0, t.dim, t.strategy, t.seed)?;
    let mut rows = Vec::new();
    for &n_k in &opts.n_k_grid {
        let mut draw_rng = SeededRng::with_stream(t.seed, 13);
        let latency = measure(t.reps, t.warmup, || {
            let keys = bank.sample_key_set(None, n_k, &mut draw_rng);
            enhance_batch(&queries, &keys, &params, 1, t.parallel).map(drop)
        })?;
        let quality = quality_proxy(&QualityOptions {
            n_k,
            ..opts.quality.clone()
        })?;
        rows.push(NkRow { n_k, latency, quality });
    }
    Ok(rows)
}

pub fn nk_table(rows: &[NkRow]) -> Table {
    let mut t = Table::new(&[
        "n_k",
        "median_ns",
        "p90_ns",
        "raw_accuracy",
        "enhanced_accuracy",
        "raw_cosine",
        "enhanced_cosine",
    ]);
    for r in rows {
        t.push(vec![
            cell(r.n_k),
            opt_cell(Some(r.latency.median_ns)),
            opt_cell(Some(r.latency.p90_ns)),
            cell(r.quality.raw.accuracy),
            cell(r.quality.enhanced.accuracy),
            cell(r.quality.raw.mean_cosine),
            cell(r.quality.enhanced.mean_cosine),
        ]);
    }
    t
}

#[derive(Debug, Clone)]
pub struct DiversityOptions {
    pub trials: usize,
    pub n_frames: usize,
    pub per_frame: usize,
    pub capacity: usize,
    pub n_k: usize,
    pub rho: f64,
    pub score_model: ScoreModel,
    pub dim: usize,
    pub seed: u64,
}

impl Default for DiversityOptions {
    fn default() -> Self {
        Self {
            trials: 30,
            n_frames: 40,
            per_frame: 50,
            capacity: 1_000,
            n_k: 100,
            rho: 0.95,
            score_model: ScoreModel::FrameCorrelated { spread: 0.05 },
            dim: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiversityReport {
    /// Per trial, key-set frame entropy for each of [`SamplingStrategy::ALL`].
    pub per_trial: Vec<[f64; 3]>,
}

impl DiversityReport {
    pub fn entropies(&self, strategy: SamplingStrategy) -> Vec<f64> {
        let i = SamplingStrategy::ALL.iter().position(|&s| s == strategy).expect("known strategy");
        self.per_trial.iter().map(|t| t[i]).collect()
    }
}

/// Frame entropy of key sets drawn by each strategy from the same bank.
pub fn diversity(opts: &DiversityOptions) -> Result<DiversityReport> {
    let mut per_trial = Vec::with_capacity(opts.trials);
    for trial in 0..opts.trials {
        let seed = opts.seed.wrapping_add(trial as u64);
        let spec = StreamSpec {
            n_frames: opts.n_frames,
            dim: opts.dim,
            pixel_per_frame: 0,
            instance_per_frame: opts.per_frame,
            redundancy_rho: opts.rho,
            score_model: opts.score_model,
            seed,
            ..StreamSpec::default()
        };
        let stream = generate_stream(&spec)?;
        let mut bank = MemoryBank::new(BankConfig::new(opts.capacity, opts.n_k))?;
        let mut rng = SeededRng::with_stream(seed, 30);
        for frame in stream {
            if !frame.instance_features.is_empty() {
                bank.insert_batch(frame.instance_features, &mut rng)?;
            }
        }
        let mut row = [0.0; 3];
        for (slot, strategy) in row.iter_mut().zip(SamplingStrategy::ALL) {
            bank.set_strategy(strategy);
            let mut draw = SeededRng::with_stream(seed, 31);
            *slot = bank.construct_key_set(&mut draw).frame_entropy();
        }
        per_trial.push(row);
    }
    Ok(DiversityReport { per_trial })
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn diversity_table(report: &DiversityReport) -> Table {
    let mut t = Table::new(&["strategy", "mean_entropy", "std_entropy", "trials"]);
    for s in SamplingStrategy::ALL {
        let (mean, std) = mean_std(&report.entropies(s));
        t.push(vec![cell(s.name()), cell(mean), cell(std), cell(report.per_trial.len())]);
    }
    t
}

#[derive(Debug, Clone)]
pub struct UpdatePolicyOptions {
    pub n_m: usize,
    pub u: usize,
    pub frames_per_video: usize,
    pub videos: usize,
    pub strategy: SamplingStrategy,
    pub policies: Vec<UpdatePolicy>,
    pub scopes: Vec<Scope>,
    pub seed: u64,
}

impl Default for UpdatePolicyOptions {
    fn default() -> Self {
        Self {
            n_m: 2_000,
            u: 50,
            frames_per_video: 160,
            videos: 2,
            strategy: SamplingStrategy::Random,
            policies: vec![UpdatePolicy::FeatureWise(SamplingStrategy::Random), UpdatePolicy::FrameWise],
            scopes: vec![Scope::VideoWise, Scope::ClassWise],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateRow {
    pub policy: UpdatePolicy,
    pub scope: Scope,
    pub video: usize,
    pub frame_t: usize,
    pub bank_size: usize,
    pub distinct_frames: usize,
}

fn tagged_batch(frame: u64, u: usize) -> Result<Vec<ScoredFeature>> {
    let f = FeatureVector::new(vec![frame as f64])?;
    (0..u)
        .map(|_| ScoredFeature::new(f.clone(), 0.5, frame, 0, Level::Instance))
        .collect()
}

/// Distinct frames left in a bank of `n_m` after `frames` updates of `u`
/// features each.
pub fn visible_frames_after(policy: UpdatePolicy, n_m: usize, u: usize, frames: usize, seed: u64) -> Result<usize> {
    let config = BankConfig::new(n_m, 0).update_policy(policy);
    let mut bank = MemoryBank::new(config)?;
    let mut rng = SeededRng::new(seed);
    for t in 0..frames {
        bank.insert_batch(tagged_batch(t as u64, u)?, &mut rng)?;
    }
    Ok(bank.stats().distinct_frames)
}

/// Bank coverage over time under each policy and scope, across video
/// boundaries.
pub fn update_policy(opts: &UpdatePolicyOptions) -> Result<Vec<UpdateRow>> {
    let mut rows = Vec::new();
    for &policy in &opts.policies {
        for &scope in &opts.scopes {
            let config = BankConfig::new(opts.n_m, 0)
                .strategy(opts.strategy)
                .update_policy(policy)
                .scope(scope);
            let mut bank = MemoryBank::new(config)?;
            let mut rng = SeededRng::new(opts.seed);
            let mut t = 0usize;
            for video in 0..opts.videos {
                for _ in 0..opts.frames_per_video {
                    bank.insert_batch(tagged_batch(t as u64, opts.u)?, &mut rng)?;
                    t += 1;
                    let s = bank.stats();
                    rows.push(UpdateRow {
                        policy,
                        scope,
                        video,
                        frame_t: t,
                        bank_size: s.size,
                        distinct_frames: s.distinct_frames,
                    });
                }
                bank.clear();
            }
        }
    }
    Ok(rows)
}

pub fn update_table(rows: &[UpdateRow]) -> Table {
    let mut t = Table::new(&["policy", "scope", "video", "frame_t", "bank_size", "distinct_frames"]);
    for r in rows {
        t.push(vec![
            r.policy.name(),
            cell(r.scope.name()),
            cell(r.video),
            cell(r.frame_t),
            cell(r.bank_size),
            cell(r.distinct_frames),
        ]);
    }
    t
}
