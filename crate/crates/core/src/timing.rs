use std::time::Instant;

/// Nanoseconds spent in `f`, together with its result.
pub fn timed<T>(f: impl FnOnce() -> T) -> (T, u64) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed().as_nanos() as u64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencySummary {
    pub median_ns: f64,
    pub p90_ns: f64,
    pub samples: usize,
}

/// Linear-interpolated quantile of an ascending slice.
pub fn quantile(sorted: &[u64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] as f64 * (1.0 - frac) + sorted[hi] as f64 * frac
}

/// Median and p90 of the samples, or `None` when there are none.
pub fn summarize(samples: &[u64]) -> Option<LatencySummary> {
    if samples.is_empty() {
        return None;
    }
    let mut s = samples.to_vec();
    s.sort_unstable();
    Some(LatencySummary {
        median_ns: quantile(&s, 0.5),
        p90_ns: quantile(&s, 0.9),
        samples: s.len(),
    })
}
