//! Bounded feature memory with sampled key-set construction.
//!
//! The bank never hands its whole contents to the enhancement stage; instead
//! [`MemoryBank::construct_key_set`] draws at most `n_k` slots with one of
//! three strategies. On overflow, individual features are evicted by the same
//! strategies (inverted for the score-driven ones), or whole frames are dropped
//! under the [`UpdatePolicy::FrameWise`] baseline.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{FeatureVector, KeySet, Level, ScoredFeature, SeededRng, SlotId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SamplingStrategy {
    /// Uniform over all subsets of the requested size.
    #[serde(rename = "random")]
    Random,
    /// Deterministic top-k by score.
    #[serde(rename = "score")]
    ScoreRanking,
    /// Weighted without replacement, weights `softmax(score)`.
    #[serde(rename = "freq")]
    FrequencyGuided,
}

impl SamplingStrategy {
    pub const ALL: [SamplingStrategy; 3] = [
        SamplingStrategy::Random,
        SamplingStrategy::ScoreRanking,
        SamplingStrategy::FrequencyGuided,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SamplingStrategy::Random => "random",
            SamplingStrategy::ScoreRanking => "score",
            SamplingStrategy::FrequencyGuided => "freq",
        }
    }
}

impl std::str::FromStr for SamplingStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "score" => Ok(Self::ScoreRanking),
            "freq" => Ok(Self::FrequencyGuided),
            other => Err(Error::InvalidConfig(format!("unknown strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UpdatePolicy {
    /// Evict exactly the overflow, one feature at a time, chosen by strategy.
    #[serde(rename = "feature")]
    FeatureWise(SamplingStrategy),
    /// Drop whole frames, oldest first, until the bank fits.
    #[serde(rename = "frame")]
    FrameWise,
}

impl UpdatePolicy {
    pub fn name(self) -> String {
        match self {
            UpdatePolicy::FeatureWise(s) => format!("feature-{}", s.name()),
            UpdatePolicy::FrameWise => "frame".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scope {
    /// Emptied by [`MemoryBank::clear`] at every video boundary.
    #[serde(rename = "video")]
    VideoWise,
    /// Persists across videos.
    #[serde(rename = "class")]
    ClassWise,
}

impl Scope {
    pub fn name(self) -> &'static str {
        match self {
            Scope::VideoWise => "video",
            Scope::ClassWise => "class",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankConfig {
    pub capacity: usize,
    pub n_k: usize,
    pub strategy: SamplingStrategy,
    pub update_policy: UpdatePolicy,
    pub scope: Scope,
    /// Reject features of any other level.
    #[serde(default)]
    pub accepts: Option<Level>,
    /// Reject batches whose frame index precedes the latest stored one.
    /// Disabled when frames are deliberately processed out of order.
    #[serde(default = "default_true")]
    pub require_monotone_frames: bool,
}

fn default_true() -> bool {
    true
}

impl Default for BankConfig {
    fn default() -> Self {
        Self {
            capacity: 24_000,
            n_k: 2_000,
            strategy: SamplingStrategy::Random,
            update_policy: UpdatePolicy::FeatureWise(SamplingStrategy::Random),
            scope: Scope::VideoWise,
            accepts: None,
            require_monotone_frames: true,
        }
    }
}

impl BankConfig {
    pub fn new(capacity: usize, n_k: usize) -> Self {
        Self {
            capacity,
            n_k,
            ..Self::default()
        }
    }

    pub fn strategy(mut self, strategy: SamplingStrategy) -> Self {
        self.strategy = strategy;
        self
    }

    pub fn update_policy(mut self, policy: UpdatePolicy) -> Self {
        self.update_policy = policy;
        self
    }

    pub fn scope(mut self, scope: Scope) -> Self {
        self.scope = scope;
        self
    }

    pub fn accepts(mut self, level: Level) -> Self {
        self.accepts = Some(level);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Slot {
    id: SlotId,
    /// Insertion batch; one batch holds exactly one frame.
    batch: u64,
    feature: ScoredFeature,
}

/// Outcome of one [`MemoryBank::insert_batch`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EvictionReport {
    /// Evicted slots in ascending id order.
    pub evicted: Vec<SlotId>,
}

impl EvictionReport {
    pub fn count(&self) -> usize {
        self.evicted.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BankStats {
    pub size: usize,
    pub distinct_frames: usize,
    /// Shannon entropy (nats) of the stored frame indices.
    pub frame_entropy: f64,
    /// Ten equal-width score bins over `[0, 1]`.
    pub score_histogram: Vec<usize>,
}

pub const SCORE_BINS: usize = 10;

/// Shannon entropy in nats of the empirical distribution of `frames`.
pub fn frame_entropy(frames: impl IntoIterator<Item = u64>) -> f64 {
    let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
    let mut total = 0usize;
    for f in frames {
        *counts.entry(f).or_default() += 1;
        total += 1;
    }
    if total == 0 {
        return 0.0;
    }
    let n = total as f64;
    let h: f64 = counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum();
    // A single frame gives -1 * ln 1 = -0.0.
    h.max(0.0)
}

/// Key-set order: higher score, then more recent frame, then lower slot id.
fn rank_cmp(a: &Slot, b: &Slot) -> Ordering {
    b.feature
        .score()
        .total_cmp(&a.feature.score())
        .then(b.feature.frame_index.cmp(&a.feature.frame_index))
        .then(a.id.cmp(&b.id))
}

/// Indices of the `k` best entries of `items` under `cmp`, in ascending index order.
fn top_k_by<T>(items: &[T], k: usize, cmp: impl Fn(&T, &T) -> Ordering) -> Vec<usize> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    if k < order.len() {
        if k > 0 {
            order.select_nth_unstable_by(k - 1, |&a, &b| cmp(&items[a], &items[b]).then(a.cmp(&b)));
        }
        order.truncate(k);
    }
    order.sort_unstable();
    order
}

/// Softmax weights of `values`, max-subtracted.
fn softmax_weights(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let v: Vec<f64> = values.collect();
    crate::geo::softmax(&v)
}

/// Weighted sampling without replacement by exponential keys: each item gets
/// `ln(u) / w` with `u ~ U(0, 1]`, and the `k` largest keys win.
fn weighted_without_replacement(weights: &[f64], k: usize, rng: &mut SeededRng) -> Vec<usize> {
    let keys: Vec<f64> = weights
        .iter()
        .map(|&w| {
            let u: f64 = 1.0 - rng.random::<f64>();
            u.ln() / w
        })
        .collect();
    top_k_by(&keys, k, |a, b| b.total_cmp(a))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    config: BankConfig,
    slots: Vec<Slot>,
    next_slot: u64,
    insertion_counter: u64,
    latest_frame: Option<u64>,
}

impl MemoryBank {
    pub fn new(config: BankConfig) -> Result<Self> {
        if config.capacity == 0 {
            return Err(Error::InvalidConfig("bank capacity must be positive".into()));
        }
        Ok(Self {
            config,
            slots: Vec::new(),
            next_slot: 0,
            insertion_counter: 0,
            latest_frame: None,
        })
    }

    pub fn config(&self) -> &BankConfig {
        &self.config
    }

    /// Switches the key-set strategy. Stored features are untouched.
    pub fn set_strategy(&mut self, strategy: SamplingStrategy) {
        self.config.strategy = strategy;
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.config.capacity
    }

    /// Feature dimension of the stored features, if any are stored.
    pub fn dim(&self) -> Option<usize> {
        self.slots.first().map(|s| s.feature.dim())
    }

    /// Stored features in slot-id order.
    pub fn iter(&self) -> impl Iterator<Item = (SlotId, &ScoredFeature)> {
        self.slots.iter().map(|s| (s.id, &s.feature))
    }

    pub fn class_counts(&self) -> BTreeMap<u32, usize> {
        let mut counts = BTreeMap::new();
        for s in &self.slots {
            *counts.entry(s.feature.class_id).or_default() += 1;
        }
        counts
    }

    fn validate_batch(&self, features: &[ScoredFeature]) -> Result<()> {
        if features.len() > self.config.capacity {
            return Err(Error::BatchTooLarge {
                batch: features.len(),
                capacity: self.config.capacity,
            });
        }
        let first = &features[0];
        let dim = self.dim().unwrap_or(first.dim());
        for f in features {
            if f.frame_index != first.frame_index {
                return Err(Error::MixedFrameIndices {
                    first: first.frame_index,
                    other: f.frame_index,
                });
            }
            if f.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: f.dim(),
                });
            }
            if let Some(level) = self.config.accepts {
                if f.level != level {
                    return Err(Error::LevelMismatch {
                        expected: level,
                        found: f.level,
                    });
                }
            }
        }
        if self.config.require_monotone_frames {
            if let Some(latest) = self.latest_frame {
                if first.frame_index < latest {
                    return Err(Error::NonMonotoneFrame {
                        incoming: first.frame_index,
                        latest,
                    });
                }
            }
        }
        Ok(())
    }

    /// Stores one frame's features, then evicts until the bank fits.
    ///
    /// Under feature-wise updating the newly inserted features compete for
    /// eviction on equal terms with the old ones.
    pub fn insert_batch(&mut self, features: Vec<ScoredFeature>, rng: &mut SeededRng) -> Result<EvictionReport> {
        if features.is_empty() {
            return Ok(EvictionReport::default());
        }
        self.validate_batch(&features)?;
        let frame = features[0].frame_index;
        let batch = self.insertion_counter;
        self.insertion_counter += 1;
        self.latest_frame = Some(self.latest_frame.map_or(frame, |l| l.max(frame)));
        for feature in features {
            self.slots.push(Slot {
                id: SlotId(self.next_slot),
                batch,
                feature,
            });
            self.next_slot += 1;
        }

        let overflow = self.slots.len().saturating_sub(self.config.capacity);
        if overflow == 0 {
            return Ok(EvictionReport::default());
        }
        let victims = self.select_victims(overflow, rng);
        let mut doomed = vec![false; self.slots.len()];
        for &v in &victims {
            doomed[v] = true;
        }
        let mut evicted = Vec::with_capacity(victims.len());
        let mut pos = 0;
        self.slots.retain(|s| {
            let keep = !doomed[pos];
            pos += 1;
            if !keep {
                evicted.push(s.id);
            }
            keep
        });
        debug_assert!(self.slots.len() <= self.config.capacity);
        Ok(EvictionReport { evicted })
    }

    fn select_victims(&self, overflow: usize, rng: &mut SeededRng) -> Vec<usize> {
        let n = self.slots.len();
        match self.config.update_policy {
            UpdatePolicy::FeatureWise(SamplingStrategy::Random) => index::sample(rng, n, overflow).into_vec(),
            UpdatePolicy::FeatureWise(SamplingStrategy::ScoreRanking) => {
                top_k_by(&self.slots, overflow, |a, b| rank_cmp(b, a))
            }
            UpdatePolicy::FeatureWise(SamplingStrategy::FrequencyGuided) => {
                let w = softmax_weights(self.slots.iter().map(|s| -s.feature.score()));
                weighted_without_replacement(&w, overflow, rng)
            }
            UpdatePolicy::FrameWise => {
                // Slots are in insertion order, so batches are contiguous runs.
                let mut victims = Vec::new();
                let mut remaining = n;
                let mut i = 0;
                while remaining > self.config.capacity && i < n {
                    let batch = self.slots[i].batch;
                    while i < n && self.slots[i].batch == batch {
                        victims.push(i);
                        remaining -= 1;
                        i += 1;
                    }
                }
                victims
            }
        }
    }

    /// Draws `min(n_k, len)` distinct slots per the configured strategy.
    pub fn construct_key_set(&self, rng: &mut SeededRng) -> KeySet {
        self.construct_key_set_for(None, rng)
    }

    /// As [`construct_key_set`](Self::construct_key_set), restricted to one
    /// class when `class` is given.
    pub fn construct_key_set_for(&self, class: Option<u32>, rng: &mut SeededRng) -> KeySet {
        self.sample_key_set(class, self.config.n_k, rng)
    }

    /// Key-set construction with an explicit size.
    pub fn sample_key_set(&self, class: Option<u32>, n_k: usize, rng: &mut SeededRng) -> KeySet {
        let candidates: Vec<&Slot> = match class {
            None => self.slots.iter().collect(),
            Some(c) => self.slots.iter().filter(|s| s.feature.class_id == c).collect(),
        };
        let n = n_k.min(candidates.len());
        if n == 0 {
            return KeySet::new();
        }
        let mut chosen = match self.config.strategy {
            SamplingStrategy::Random => index::sample(rng, candidates.len(), n).into_vec(),
            SamplingStrategy::ScoreRanking => top_k_by(&candidates, n, |a, b| rank_cmp(a, b)),
            SamplingStrategy::FrequencyGuided => {
                let w = softmax_weights(candidates.iter().map(|s| s.feature.score()));
                weighted_without_replacement(&w, n, rng)
            }
        };
        chosen.sort_unstable();
        let elements = chosen.iter().map(|&i| candidates[i].feature.clone()).collect();
        let ids = chosen.iter().map(|&i| candidates[i].id).collect();
        KeySet::from_parts(elements, ids)
    }

    /// Every stored feature, in slot-id order.
    pub fn concat_key_set(&self) -> KeySet {
        KeySet::from_parts(
            self.slots.iter().map(|s| s.feature.clone()).collect(),
            self.slots.iter().map(|s| s.id).collect(),
        )
    }

    /// Video boundary. Empties a video-wise bank; class-wise contents stay.
    /// Either way the frame-order check restarts for the next video.
    pub fn clear(&mut self) {
        if self.config.scope == Scope::VideoWise {
            self.slots.clear();
        }
        self.latest_frame = None;
    }

    pub fn stats(&self) -> BankStats {
        let mut histogram = vec![0usize; SCORE_BINS];
        let mut frames: BTreeMap<u64, ()> = BTreeMap::new();
        for s in &self.slots {
            let bin = ((s.feature.score() * SCORE_BINS as f64) as usize).min(SCORE_BINS - 1);
            histogram[bin] += 1;
            frames.insert(s.feature.frame_index, ());
        }
        BankStats {
            size: self.slots.len(),
            distinct_frames: frames.len(),
            frame_entropy: frame_entropy(self.slots.iter().map(|s| s.feature.frame_index)),
            score_histogram: histogram,
        }
    }

    /// Writes a header line followed by one JSON record per slot.
    pub fn write_snapshot<W: Write>(&self, mut w: W) -> Result<()> {
        let header = SnapshotHeader {
            capacity: self.config.capacity,
            n_k: self.config.n_k,
            strategy: self.config.strategy,
            update_policy: self.config.update_policy,
            scope: self.config.scope,
            accepts: self.config.accepts,
            require_monotone_frames: self.config.require_monotone_frames,
            next_slot_id: self.next_slot,
            insertion_counter: self.insertion_counter,
            latest_frame: self.latest_frame,
        };
        serde_json::to_writer(&mut w, &header).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
        for s in &self.slots {
            let rec = SnapshotRecord {
                slot_id: s.id,
                frame_index: s.feature.frame_index,
                class_id: s.feature.class_id,
                score: s.feature.score(),
                level: s.feature.level,
                feature: s.feature.feature.clone(),
                batch: Some(s.batch),
            };
            serde_json::to_writer(&mut w, &rec).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_snapshot<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines().enumerate();
        let header: SnapshotHeader = match lines.next() {
            Some((_, line)) => serde_json::from_str(&line?).map_err(|e| Error::Parse {
                line: 1,
                message: e.to_string(),
            })?,
            None => {
                return Err(Error::Parse {
                    line: 1,
                    message: "missing header".into(),
                })
            }
        };
        let mut bank = MemoryBank::new(BankConfig {
            capacity: header.capacity,
            n_k: header.n_k,
            strategy: header.strategy,
            update_policy: header.update_policy,
            scope: header.scope,
            accepts: header.accepts,
            require_monotone_frames: header.require_monotone_frames,
        })?;
        let mut last_id = None;
        for (i, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |message: String| Error::Parse { line: i + 1, message };
            let rec: SnapshotRecord = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
            if last_id.is_some_and(|l| rec.slot_id <= l) {
                return Err(bad("slot ids must be strictly increasing".into()));
            }
            last_id = Some(rec.slot_id);
            let feature = ScoredFeature::new(rec.feature, rec.score, rec.frame_index, rec.class_id, rec.level)
                .map_err(|e| bad(e.to_string()))?;
            if bank.dim().is_some_and(|d| d != feature.dim()) {
                return Err(bad("inconsistent feature dimension".into()));
            }
            bank.slots.push(Slot {
                id: rec.slot_id,
                batch: rec.batch.unwrap_or(rec.frame_index),
                feature,
            });
        }
        if bank.slots.len() > bank.config.capacity {
            return Err(Error::Parse {
                line: 1,
                message: "snapshot holds more slots than its capacity".into(),
            });
        }
        bank.next_slot = header
            .next_slot_id
            .max(last_id.map_or(0, |SlotId(id)| id + 1));
        bank.insertion_counter = header.insertion_counter;
        bank.latest_frame = header.latest_frame;
        Ok(bank)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SnapshotHeader {
    capacity: usize,
    n_k: usize,
    strategy: SamplingStrategy,
    update_policy: UpdatePolicy,
    scope: Scope,
    #[serde(default)]
    accepts: Option<Level>,
    #[serde(default = "default_true")]
    require_monotone_frames: bool,
    #[serde(default)]
    next_slot_id: u64,
    #[serde(default)]
    insertion_counter: u64,
    #[serde(default)]
    latest_frame: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SnapshotRecord {
    slot_id: SlotId,
    frame_index: u64,
    class_id: u32,
    score: f64,
    level: Level,
    feature: FeatureVector,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    batch: Option<u64>,
}

/// Indices of the `k` highest-scored features (ties: earlier index first),
/// in ascending index order.
pub fn top_scored(features: &[ScoredFeature], k: usize) -> Vec<usize> {
    top_k_by(features, k, |a, b| b.score().total_cmp(&a.score()))
}
