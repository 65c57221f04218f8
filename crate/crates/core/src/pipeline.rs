//! Per-frame inference loop over a pixel-level and an instance-level bank.
//!
//! Each frame is enhanced against a key set sampled from the matching bank,
//! then a subset of the enhanced features is written back: the `u_ins`
//! highest-scored instance features and `u_pix` randomly chosen pixel
//! features. Feature extraction and proposal generation are out of the
//! picture; frames arrive as ready-made [`FrameFeatures`].

use std::io::{BufRead, Write};

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::bank::{top_scored, BankConfig, MemoryBank};
use crate::error::{Error, Result};
use crate::geo::{enhance_batch, GeoParams};
use crate::timing::{summarize, timed, LatencySummary};
use crate::types::{FeatureVector, KeySet, Level, ScoredFeature, SeededRng};

/// Everything the detector stand-in produces for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatures {
    pub frame_index: u64,
    pub pixel_features: Vec<ScoredFeature>,
    pub instance_features: Vec<ScoredFeature>,
}

impl FrameFeatures {
    pub fn new(
        frame_index: u64,
        pixel_features: Vec<ScoredFeature>,
        instance_features: Vec<ScoredFeature>,
    ) -> Result<Self> {
        let frame = Self {
            frame_index,
            pixel_features,
            instance_features,
        };
        frame.validate()?;
        Ok(frame)
    }

    fn validate(&self) -> Result<()> {
        for (set, level) in [(&self.pixel_features, Level::Pixel), (&self.instance_features, Level::Instance)] {
            for f in set {
                if f.frame_index != self.frame_index {
                    return Err(Error::MixedFrameIndices {
                        first: self.frame_index,
                        other: f.frame_index,
                    });
                }
                if f.level != level {
                    return Err(Error::LevelMismatch {
                        expected: level,
                        found: f.level,
                    });
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    /// Pixel-level enhancement depth; 0 disables the level.
    pub n_pix: usize,
    /// Instance-level enhancement depth; 0 disables the level.
    pub n_ins: usize,
    /// Process frames in a seeded shuffled order.
    pub offline_test: bool,
    pub u_pix: usize,
    pub u_ins: usize,
    pub pixel_bank: BankConfig,
    pub instance_bank: BankConfig,
    pub pixel_geo: GeoParams,
    pub instance_geo: GeoParams,
    pub seed: u64,
    /// Enhance the queries of a frame across threads.
    pub parallel: bool,
}

impl PipelineConfig {
    /// Depths 1 (pixel) and 2 (instance), 100/75 features written back per
    /// frame, randomly initialized projections with identity transforms.
    pub fn with_random_params(pixel_dim: usize, instance_dim: usize, heads: usize, seed: u64) -> Result<Self> {
        let mut rng = SeededRng::with_stream(seed, 0x6E0);
        Ok(Self {
            n_pix: 1,
            n_ins: 2,
            offline_test: false,
            u_pix: 100,
            u_ins: 75,
            pixel_bank: BankConfig::default(),
            instance_bank: BankConfig::default(),
            pixel_geo: GeoParams::random(pixel_dim, heads, &mut rng)?,
            instance_geo: GeoParams::random(instance_dim, heads, &mut rng)?,
            seed,
            parallel: false,
        })
    }
}

/// Size and frame coverage of a bank at one point in time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BankCounts {
    pub size: usize,
    pub distinct_frames: usize,
}

impl BankCounts {
    fn of(bank: &MemoryBank) -> Self {
        let s = bank.stats();
        Self {
            size: s.size,
            distinct_frames: s.distinct_frames,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StageLatencies {
    pub pixel_enhance_ns: u64,
    pub instance_enhance_ns: u64,
    pub pixel_update_ns: u64,
    pub instance_update_ns: u64,
}

impl StageLatencies {
    pub fn update_ns(&self) -> u64 {
        self.pixel_update_ns + self.instance_update_ns
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameResult {
    pub frame_index: u64,
    pub enhanced_pixel_features: Vec<ScoredFeature>,
    pub enhanced_instance_features: Vec<ScoredFeature>,
    pub latencies: StageLatencies,
    pub pixel_keyset_size: usize,
    pub instance_keyset_size: usize,
    /// Banks as seen by the enhancement stages, before this frame's update.
    pub pixel_bank_before: BankCounts,
    pub instance_bank_before: BankCounts,
    /// Banks after this frame's update.
    pub pixel_bank_after: BankCounts,
    pub instance_bank_after: BankCounts,
}

/// Enhances `q_set` against a key set already drawn from a bank.
///
/// Scores and metadata are preserved; only feature values change.
pub fn enhance_with_key_set(
    q_set: &[ScoredFeature],
    keys: &KeySet,
    params: &GeoParams,
    depth: usize,
    parallel: bool,
) -> Result<Vec<ScoredFeature>> {
    if depth == 0 || q_set.is_empty() {
        return Ok(q_set.to_vec());
    }
    let queries: Vec<FeatureVector> = q_set.iter().map(|q| q.feature.clone()).collect();
    let enhanced = enhance_batch(&queries, keys, params, depth, parallel)?;
    Ok(q_set.iter().zip(enhanced).map(|(q, f)| q.with_feature(f)).collect())
}

/// Draws one key set from `bank` and applies `depth` enhancement stages to
/// every query. Depth 0 returns the queries untouched and draws nothing.
pub fn enhance_via_mem_bank(
    q_set: &[ScoredFeature],
    bank: &MemoryBank,
    params: &GeoParams,
    depth: usize,
    rng: &mut SeededRng,
) -> Result<Vec<ScoredFeature>> {
    if depth == 0 {
        return Ok(q_set.to_vec());
    }
    let keys = bank.construct_key_set(rng);
    enhance_with_key_set(q_set, &keys, params, depth, false)
}

/// Writes one frame's enhanced features back: the `u_ins` best instance
/// features by score and `u_pix` pixel features picked uniformly.
pub fn update_banks(
    pixel_bank: &mut MemoryBank,
    instance_bank: &mut MemoryBank,
    enhanced: &FrameFeatures,
    u_pix: usize,
    u_ins: usize,
    rng: &mut SeededRng,
) -> Result<()> {
    update_pixel_bank(pixel_bank, &enhanced.pixel_features, u_pix, rng)?;
    update_instance_bank(instance_bank, &enhanced.instance_features, u_ins, rng)?;
    Ok(())
}

fn update_pixel_bank(bank: &mut MemoryBank, pixels: &[ScoredFeature], u_pix: usize, rng: &mut SeededRng) -> Result<()> {
    let n = u_pix.min(pixels.len());
    let mut picked = index::sample(rng, pixels.len(), n).into_vec();
    picked.sort_unstable();
    bank.insert_batch(picked.into_iter().map(|i| pixels[i].clone()).collect(), rng)?;
    Ok(())
}

fn update_instance_bank(
    bank: &mut MemoryBank,
    instances: &[ScoredFeature],
    u_ins: usize,
    rng: &mut SeededRng,
) -> Result<()> {
    let best = top_scored(instances, u_ins);
    bank.insert_batch(best.into_iter().map(|i| instances[i].clone()).collect(), rng)?;
    Ok(())
}

/// Stateful driver holding both banks across frames and videos.
#[derive(Debug, Clone)]
pub struct Pipeline {
    config: PipelineConfig,
    pixel_bank: MemoryBank,
    instance_bank: MemoryBank,
    rng: SeededRng,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        let mut pixel_cfg = config.pixel_bank.clone().accepts(Level::Pixel);
        let mut instance_cfg = config.instance_bank.clone().accepts(Level::Instance);
        pixel_cfg.require_monotone_frames = !config.offline_test;
        instance_cfg.require_monotone_frames = !config.offline_test;
        Ok(Self {
            pixel_bank: MemoryBank::new(pixel_cfg)?,
            instance_bank: MemoryBank::new(instance_cfg)?,
            rng: SeededRng::new(config.seed),
            config,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn pixel_bank(&self) -> &MemoryBank {
        &self.pixel_bank
    }

    pub fn instance_bank(&self) -> &MemoryBank {
        &self.instance_bank
    }

    /// Runs one frame: pixel enhancement, instance enhancement, bank update.
    pub fn process_frame(&mut self, frame: &FrameFeatures) -> Result<FrameResult> {
        frame.validate()?;
        let cfg = &self.config;
        let pixel_bank_before = BankCounts::of(&self.pixel_bank);
        let instance_bank_before = BankCounts::of(&self.instance_bank);

        let (pixel, pixel_enhance_ns) = timed(|| -> Result<_> {
            if cfg.n_pix == 0 {
                return Ok((frame.pixel_features.clone(), 0));
            }
            let keys = self.pixel_bank.construct_key_set(&mut self.rng);
            let out = enhance_with_key_set(&frame.pixel_features, &keys, &cfg.pixel_geo, cfg.n_pix, cfg.parallel)?;
            Ok((out, keys.len()))
        });
        let (enhanced_pixel, pixel_keyset_size) = pixel?;

        let (instance, instance_enhance_ns) = timed(|| -> Result<_> {
            if cfg.n_ins == 0 {
                return Ok((frame.instance_features.clone(), 0));
            }
            let keys = self.instance_bank.construct_key_set(&mut self.rng);
            let out = enhance_with_key_set(
                &frame.instance_features,
                &keys,
                &cfg.instance_geo,
                cfg.n_ins,
                cfg.parallel,
            )?;
            Ok((out, keys.len()))
        });
        let (enhanced_instance, instance_keyset_size) = instance?;

        let (r, pixel_update_ns) =
            timed(|| update_pixel_bank(&mut self.pixel_bank, &enhanced_pixel, cfg.u_pix, &mut self.rng));
        r?;
        let (r, instance_update_ns) =
            timed(|| update_instance_bank(&mut self.instance_bank, &enhanced_instance, cfg.u_ins, &mut self.rng));
        r?;

        Ok(FrameResult {
            frame_index: frame.frame_index,
            enhanced_pixel_features: enhanced_pixel,
            enhanced_instance_features: enhanced_instance,
            latencies: StageLatencies {
                pixel_enhance_ns,
                instance_enhance_ns,
                pixel_update_ns,
                instance_update_ns,
            },
            pixel_keyset_size,
            instance_keyset_size,
            pixel_bank_before,
            instance_bank_before,
            pixel_bank_after: BankCounts::of(&self.pixel_bank),
            instance_bank_after: BankCounts::of(&self.instance_bank),
        })
    }

    /// Processes one video, shuffled when `offline_test` is set, and then
    /// marks the video boundary on both banks.
    pub fn run_video(&mut self, frames: &[FrameFeatures]) -> Result<Vec<FrameResult>> {
        let results = self.process_video(frames)?;
        self.end_video();
        Ok(results)
    }

    /// [`run_video`](Self::run_video) without the closing boundary, so the
    /// banks can be inspected first.
    pub fn process_video(&mut self, frames: &[FrameFeatures]) -> Result<Vec<FrameResult>> {
        if frames.is_empty() {
            return Err(Error::InvalidConfig("video has no frames".into()));
        }
        for w in frames.windows(2) {
            if w[1].frame_index <= w[0].frame_index {
                return Err(Error::NonMonotoneFrame {
                    incoming: w[1].frame_index,
                    latest: w[0].frame_index,
                });
            }
        }
        let mut order: Vec<usize> = (0..frames.len()).collect();
        if self.config.offline_test {
            order.shuffle(&mut self.rng);
        }
        let results = order
            .into_iter()
            .map(|i| self.process_frame(&frames[i]))
            .collect::<Result<Vec<_>>>()?;
        Ok(results)
    }

    /// Video boundary on both banks.
    pub fn end_video(&mut self) {
        self.pixel_bank.clear();
        self.instance_bank.clear();
    }
}

/// Runs a single video through fresh banks.
pub fn run_video(frames: &[FrameFeatures], config: &PipelineConfig) -> Result<Vec<FrameResult>> {
    Pipeline::new(config.clone())?.run_video(frames)
}

/// Medians of each stage, ignoring the first `warmup` processed frames.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageSummary {
    pub pixel_enhance: Option<LatencySummary>,
    pub instance_enhance: Option<LatencySummary>,
    pub update: Option<LatencySummary>,
}

pub const DEFAULT_WARMUP_FRAMES: usize = 10;

pub fn summarize_stages(results: &[FrameResult], warmup: usize) -> StageSummary {
    let rest = results.get(warmup..).unwrap_or(&[]);
    let collect = |f: fn(&StageLatencies) -> u64| -> Vec<u64> { rest.iter().map(|r| f(&r.latencies)).collect() };
    StageSummary {
        pixel_enhance: summarize(&collect(|l| l.pixel_enhance_ns)),
        instance_enhance: summarize(&collect(|l| l.instance_enhance_ns)),
        update: summarize(&collect(StageLatencies::update_ns)),
    }
}

/// Whether wall-clock columns are written or zeroed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimingMode {
    Measured,
    /// Latencies written as 0 so that repeated runs compare byte for byte.
    Redacted,
}

pub const RESULTS_CSV_HEADER: &str = "frame_index,stage,latency_ns,keyset_size,bank_size,distinct_frames";

/// One row per frame and stage. Enhancement rows report the bank the key set
/// was drawn from; update rows report the bank after insertion.
pub fn write_results_csv<W: Write>(results: &[FrameResult], timing: TimingMode, mut w: W) -> Result<()> {
    writeln!(w, "{RESULTS_CSV_HEADER}")?;
    for r in results {
        let l = &r.latencies;
        let rows = [
            ("pixel_enhance", l.pixel_enhance_ns, r.pixel_keyset_size, r.pixel_bank_before),
            ("instance_enhance", l.instance_enhance_ns, r.instance_keyset_size, r.instance_bank_before),
            ("pixel_update", l.pixel_update_ns, 0, r.pixel_bank_after),
            ("instance_update", l.instance_update_ns, 0, r.instance_bank_after),
        ];
        for (stage, ns, keys, bank) in rows {
            let ns = match timing {
                TimingMode::Measured => ns,
                TimingMode::Redacted => 0,
            };
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.frame_index, stage, ns, keys, bank.size, bank.distinct_frames
            )?;
        }
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct FeatureRecord {
    score: f64,
    class_id: u32,
    feature: FeatureVector,
}

#[derive(Debug, Serialize, Deserialize)]
struct FrameRecord {
    frame_index: u64,
    pixel: Vec<FeatureRecord>,
    instance: Vec<FeatureRecord>,
}

/// Writes frames as JSON lines.
pub fn write_stream<W: Write>(frames: &[FrameFeatures], mut w: W) -> Result<()> {
    let to_records = |fs: &[ScoredFeature]| -> Vec<FeatureRecord> {
        fs.iter()
            .map(|f| FeatureRecord {
                score: f.score(),
                class_id: f.class_id,
                feature: f.feature.clone(),
            })
            .collect()
    };
    for f in frames {
        let rec = FrameRecord {
            frame_index: f.frame_index,
            pixel: to_records(&f.pixel_features),
            instance: to_records(&f.instance_features),
        };
        serde_json::to_writer(&mut w, &rec).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Parses a JSON-lines frame stream. Errors name the offending line.
pub fn read_stream<R: BufRead>(r: R) -> Result<Vec<FrameFeatures>> {
    let mut frames = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| Error::Parse { line: i + 1, message };
        let rec: FrameRecord = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        let build = |records: Vec<FeatureRecord>, level: Level| -> Result<Vec<ScoredFeature>> {
            records
                .into_iter()
                .map(|r| ScoredFeature::new(r.feature, r.score, rec.frame_index, r.class_id, level))
                .collect()
        };
        let pixel = build(rec.pixel, Level::Pixel).map_err(|e| bad(e.to_string()))?;
        let instance = build(rec.instance, Level::Instance).map_err(|e| bad(e.to_string()))?;
        frames.push(FrameFeatures::new(rec.frame_index, pixel, instance).map_err(|e| bad(e.to_string()))?);
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::{SamplingStrategy, UpdatePolicy};
    use crate::geo::geo_reference;
    use crate::synthgen::{generate_stream, StreamSpec};

    fn sf(values: Vec<f64>, score: f64, frame: u64, level: Level) -> ScoredFeature {
        ScoredFeature::new(FeatureVector::new(values).unwrap(), score, frame, 0, level).unwrap()
    }

    fn small_config(seed: u64) -> PipelineConfig {
        let mut c = PipelineConfig::with_random_params(4, 4, 2, seed).unwrap();
        c.pixel_bank = BankConfig::new(20, 6);
        c.instance_bank = BankConfig::new(12, 4);
        c.u_pix = 3;
        c.u_ins = 2;
        c
    }

    fn small_stream(seed: u64) -> Vec<FrameFeatures> {
        generate_stream(&StreamSpec {
            n_frames: 8,
            dim: 4,
            n_classes: 2,
            pixel_per_frame: 6,
            instance_per_frame: 5,
            seed,
            ..StreamSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn depth_zero_is_identity() {
        let bank = MemoryBank::new(BankConfig::new(4, 2)).unwrap();
        let mut rng = SeededRng::new(0);
        let p = GeoParams::random(2, 1, &mut rng).unwrap();
        let q = vec![sf(vec![-1.0, 2.0], 0.3, 0, Level::Instance)];
        assert_eq!(enhance_via_mem_bank(&q, &bank, &p, 0, &mut rng).unwrap(), q);
    }

    #[test]
    fn empty_bank_non_negative_queries_pass_through() {
        let bank = MemoryBank::new(BankConfig::new(4, 2)).unwrap();
        let mut rng = SeededRng::new(0);
        let p = GeoParams::random(2, 2, &mut rng).unwrap();
        let q = vec![
            sf(vec![0.0, 2.0], 0.3, 0, Level::Instance),
            sf(vec![1.5, 0.25], 0.9, 0, Level::Instance),
        ];
        for depth in 1..4 {
            assert_eq!(enhance_via_mem_bank(&q, &bank, &p, depth, &mut rng).unwrap(), q);
        }
    }

    #[test]
    fn depth_two_equals_two_unrolled_stages() {
        let mut rng = SeededRng::new(3);
        let d = 4;
        let h_w: Vec<f64> = (0..d * d).map(|i| if i % (d + 1) == 0 { 0.9 } else { 0.05 }).collect();
        let p = GeoParams::random(d, 2, &mut rng)
            .unwrap()
            .with_transform(h_w, vec![0.1; d])
            .unwrap();
        let mut bank = MemoryBank::new(BankConfig::new(10, 4)).unwrap();
        let stored: Vec<ScoredFeature> = (0..6)
            .map(|i| sf(vec![i as f64 * 0.3, -0.2, 0.5, 1.0 - i as f64 * 0.1], 0.5, 0, Level::Instance))
            .collect();
        bank.insert_batch(stored, &mut rng).unwrap();
        let q = vec![sf(vec![0.3, -0.7, 1.2, 0.4], 0.8, 1, Level::Instance)];

        let mut r1 = SeededRng::new(21);
        let out = enhance_via_mem_bank(&q, &bank, &p, 2, &mut r1).unwrap();
        let mut r2 = SeededRng::new(21);
        let keys = bank.construct_key_set(&mut r2);
        let s1 = geo_reference(&p.transform(&q[0].feature).unwrap(), &keys, &p).unwrap();
        let s2 = geo_reference(&p.transform(&s1).unwrap(), &keys, &p).unwrap();
        let diff = out[0].feature.iter().zip(s2.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-9);
        assert_eq!(out[0].score(), 0.8);
        assert_eq!(out[0].frame_index, 1);
    }

    #[test]
    fn query_dimension_must_match() {
        let mut rng = SeededRng::new(0);
        let p = GeoParams::random(4, 2, &mut rng).unwrap();
        let mut bank = MemoryBank::new(BankConfig::new(4, 2)).unwrap();
        bank.insert_batch(vec![sf(vec![1.0; 4], 0.5, 0, Level::Instance)], &mut rng)
            .unwrap();
        let q = vec![sf(vec![1.0; 3], 0.5, 1, Level::Instance)];
        assert!(matches!(
            enhance_via_mem_bank(&q, &bank, &p, 1, &mut rng),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn update_takes_top_instances() {
        let mut rng = SeededRng::new(0);
        let mut pix = MemoryBank::new(BankConfig::new(10, 2).accepts(Level::Pixel)).unwrap();
        let mut ins = MemoryBank::new(BankConfig::new(10, 2).accepts(Level::Instance)).unwrap();
        let instances: Vec<ScoredFeature> = [0.9, 0.8, 0.7, 0.2, 0.1]
            .iter()
            .map(|&s| sf(vec![s, 0.0], s, 0, Level::Instance))
            .collect();
        let frame = FrameFeatures::new(0, vec![], instances).unwrap();
        update_banks(&mut pix, &mut ins, &frame, 3, 2, &mut rng).unwrap();
        let mut scores: Vec<f64> = ins.iter().map(|(_, f)| f.score()).collect();
        scores.sort_by(f64::total_cmp);
        assert_eq!(scores, vec![0.8, 0.9]);
        assert!(pix.is_empty());
    }

    #[test]
    fn update_picks_pixels_like_the_seeded_oracle() {
        let pixels: Vec<ScoredFeature> = (0..10)
            .map(|i| sf(vec![i as f64, 0.0], 0.5, 0, Level::Pixel))
            .collect();
        let frame = FrameFeatures::new(0, pixels, vec![]).unwrap();
        let mut pix = MemoryBank::new(BankConfig::new(10, 2)).unwrap();
        let mut ins = MemoryBank::new(BankConfig::new(10, 2)).unwrap();
        let mut rng = SeededRng::new(31);
        update_banks(&mut pix, &mut ins, &frame, 3, 2, &mut rng).unwrap();
        let got: Vec<f64> = pix.iter().map(|(_, f)| f.feature[0]).collect();

        let mut oracle = SeededRng::new(31);
        let mut expected: Vec<f64> = index::sample(&mut oracle, 10, 3).into_iter().map(|i| i as f64).collect();
        expected.sort_by(f64::total_cmp);
        assert_eq!(got, expected);
    }

    #[test]
    fn update_with_few_features_inserts_all() {
        let mut rng = SeededRng::new(0);
        let mut pix = MemoryBank::new(BankConfig::new(10, 2)).unwrap();
        let mut ins = MemoryBank::new(BankConfig::new(10, 2)).unwrap();
        let frame = FrameFeatures::new(
            0,
            vec![sf(vec![1.0], 0.2, 0, Level::Pixel)],
            vec![sf(vec![1.0], 0.2, 0, Level::Instance)],
        )
        .unwrap();
        update_banks(&mut pix, &mut ins, &frame, 100, 75, &mut rng).unwrap();
        assert_eq!((pix.len(), ins.len()), (1, 1));
    }

    #[test]
    fn frame_features_reject_wrong_levels() {
        assert!(matches!(
            FrameFeatures::new(0, vec![sf(vec![1.0], 0.2, 0, Level::Instance)], vec![]),
            Err(Error::LevelMismatch { .. })
        ));
        assert!(FrameFeatures::new(1, vec![sf(vec![1.0], 0.2, 0, Level::Pixel)], vec![]).is_err());
    }

    #[test]
    fn single_frame_with_empty_banks_is_identity() {
        let frame = FrameFeatures::new(
            0,
            vec![sf(vec![0.1, 0.2, 0.3, 0.4], 0.5, 0, Level::Pixel)],
            vec![sf(vec![1.0, 0.0, 2.0, 0.5], 0.7, 0, Level::Instance)],
        )
        .unwrap();
        let results = run_video(std::slice::from_ref(&frame), &small_config(1)).unwrap();
        assert_eq!(results[0].enhanced_pixel_features, frame.pixel_features);
        assert_eq!(results[0].enhanced_instance_features, frame.instance_features);
        assert_eq!(results[0].pixel_keyset_size, 0);
    }

    #[test]
    fn second_identical_frame_moves_toward_first() {
        // Queries are a noisy copy of a direction; the bank holds that same
        // direction from frame 0. With identity-slice projections the relation
        // feature is a convex combination of stored keys, so the enhanced
        // features align better with the frame-0 centroid.
        let d = 4;
        let raw = [
            vec![1.0, 0.2, 0.0, 0.6],
            vec![0.7, 0.9, 0.1, 0.3],
            vec![0.2, 0.1, 1.0, 0.8],
        ];
        let mk = |frame: u64| -> FrameFeatures {
            let pix = raw.iter().map(|v| sf(v.clone(), 0.5, frame, Level::Pixel)).collect();
            FrameFeatures::new(frame, pix, vec![]).unwrap()
        };
        let mut cfg = small_config(2);
        cfg.n_ins = 0;
        cfg.pixel_geo = GeoParams::identity_slices(d, 1, 1.0, 0.5).unwrap();
        let results = run_video(&[mk(0), mk(1)], &cfg).unwrap();

        let centroid: Vec<f64> = (0..d).map(|k| raw.iter().map(|v| v[k]).sum::<f64>() / 3.0).collect();
        let centroid = FeatureVector::new(centroid).unwrap();
        let mean_cos = |fs: &[ScoredFeature]| fs.iter().map(|f| f.feature.cosine(&centroid)).sum::<f64>() / fs.len() as f64;
        let before = mean_cos(&mk(1).pixel_features);
        let after = mean_cos(&results[1].enhanced_pixel_features);
        assert!(after > before, "{before} -> {after}");
        assert_eq!(results[1].pixel_keyset_size, 3);
    }

    #[test]
    fn offline_runs_are_reproducible_permutations() {
        let frames = small_stream(5);
        let mut cfg = small_config(9);
        cfg.offline_test = true;
        let a = run_video(&frames, &cfg).unwrap();
        let b = run_video(&frames, &cfg).unwrap();
        let strip = |rs: &[FrameResult]| -> Vec<(u64, Vec<ScoredFeature>)> {
            rs.iter().map(|r| (r.frame_index, r.enhanced_instance_features.clone())).collect()
        };
        assert_eq!(strip(&a), strip(&b));
        let mut order: Vec<u64> = a.iter().map(|r| r.frame_index).collect();
        assert_ne!(order, (0..8).collect::<Vec<_>>());
        order.sort();
        assert_eq!(order, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn zero_depths_pass_frames_through() {
        let frames = small_stream(6);
        let mut cfg = small_config(4);
        cfg.n_pix = 0;
        cfg.n_ins = 0;
        for (r, f) in run_video(&frames, &cfg).unwrap().iter().zip(&frames) {
            assert_eq!(r.enhanced_pixel_features, f.pixel_features);
            assert_eq!(r.enhanced_instance_features, f.instance_features);
        }
    }

    #[test]
    fn levels_stay_isolated_and_bounded() {
        let frames = small_stream(7);
        let cfg = small_config(8);
        let mut p = Pipeline::new(cfg).unwrap();
        for f in &frames {
            let r = p.process_frame(f).unwrap();
            assert!(r.pixel_keyset_size <= 6 && r.instance_keyset_size <= 4);
            assert!(p.pixel_bank().iter().all(|(_, f)| f.level == Level::Pixel));
            assert!(p.instance_bank().iter().all(|(_, f)| f.level == Level::Instance));
            assert!(p.pixel_bank().len() <= 20 && p.instance_bank().len() <= 12);
        }
    }

    #[test]
    fn class_scope_survives_video_boundary() {
        let frames = small_stream(10);
        let mut cfg = small_config(1);
        cfg.instance_bank = cfg.instance_bank.scope(crate::bank::Scope::ClassWise);
        let mut p = Pipeline::new(cfg).unwrap();
        p.run_video(&frames).unwrap();
        assert_eq!(p.pixel_bank().len(), 0);
        assert!(!p.instance_bank().is_empty());
        // Second video restarts frame numbering.
        p.run_video(&frames).unwrap();
    }

    #[test]
    fn feature_wise_outlasts_frame_wise_end_to_end() {
        let frames = generate_stream(&StreamSpec {
            n_frames: 40,
            dim: 4,
            n_classes: 2,
            pixel_per_frame: 2,
            instance_per_frame: 10,
            seed: 3,
            ..StreamSpec::default()
        })
        .unwrap();
        let distinct = |policy| {
            let mut cfg = small_config(2);
            cfg.n_pix = 0;
            cfg.u_ins = 5;
            cfg.instance_bank = BankConfig::new(20, 4).update_policy(policy);
            let rs = run_video(&frames, &cfg).unwrap();
            rs.last().unwrap().instance_bank_after.distinct_frames
        };
        assert_eq!(distinct(UpdatePolicy::FrameWise), 4);
        assert!(distinct(UpdatePolicy::FeatureWise(SamplingStrategy::Random)) > 4);
    }

    #[test]
    fn input_order_is_checked() {
        let mut frames = small_stream(1);
        frames.swap(2, 3);
        assert!(matches!(
            run_video(&frames, &small_config(0)),
            Err(Error::NonMonotoneFrame { .. })
        ));
        assert!(run_video(&[], &small_config(0)).is_err());
    }

    #[test]
    fn stream_round_trip() {
        let frames = small_stream(2);
        let mut buf = Vec::new();
        write_stream(&frames, &mut buf).unwrap();
        assert_eq!(read_stream(&buf[..]).unwrap(), frames);
    }

    #[test]
    fn stream_errors_name_the_line() {
        let text = "{\"frame_index\":0,\"pixel\":[],\"instance\":[]}\n\n{\"frame_index\":1,\"pixel\":[{\"score\":2.0,\"class_id\":0,\"feature\":[1.0]}],\"instance\":[]}\n";
        match read_stream(text.as_bytes()) {
            Err(Error::Parse { line: 3, .. }) => {}
            other => panic!("{other:?}"),
        }
        match read_stream("not json".as_bytes()) {
            Err(Error::Parse { line: 1, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn csv_layout() {
        let frames = small_stream(3);
        let rs = run_video(&frames[..2], &small_config(3)).unwrap();
        let mut buf = Vec::new();
        write_results_csv(&rs, TimingMode::Redacted, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], RESULTS_CSV_HEADER);
        assert_eq!(lines.len(), 1 + 2 * 4);
        assert_eq!(lines[1], "0,pixel_enhance,0,0,0,0");
        assert!(lines[5].starts_with("1,pixel_enhance,0,3,3,1"), "{}", lines[5]);
    }

    #[test]
    fn warmup_frames_are_skipped() {
        let frames = small_stream(4);
        let rs = run_video(&frames, &small_config(3)).unwrap();
        assert_eq!(summarize_stages(&rs, 3).update.unwrap().samples, 5);
        assert!(summarize_stages(&rs, 20).update.is_none());
    }
}
