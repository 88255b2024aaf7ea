use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Real;

pub const DEFAULT_WINDOW: usize = 128;
pub const DEFAULT_ZERO_THRESHOLD: f64 = 0.2;
pub const DEFAULT_MIN_LEN: usize = 256;

/// Raw observations as read from a source, gaps and all.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawSeries {
    pub values: Vec<f64>,
    pub domain: String,
    pub frequency: String,
    #[serde(default)]
    pub source: String,
}

impl RawSeries {
    pub fn new(values: Vec<f64>, domain: impl Into<String>) -> Self {
        Self {
            values,
            domain: domain.into(),
            frequency: String::new(),
            source: String::new(),
        }
    }
}

/// Where a clean segment came from: source name, domain tag and the index of
/// its first point in the raw series.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Origin {
    pub source: String,
    pub domain: String,
    pub start: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CleanSeries {
    pub values: Vec<f32>,
    pub origin: Origin,
}

/// A contiguous piece of some input slice.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment<T> {
    pub start: usize,
    pub values: Vec<T>,
}

/// Ratios are `None` where the reference computation divides zero by zero
/// (an empty difference array), which never fails the check.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct WindowDiagnostics {
    pub nan_count: usize,
    pub inf_count: Option<usize>,
    pub zero_ratio: Option<f64>,
    pub first_diff_zero_ratio: Option<f64>,
    pub second_diff_zero_ratio: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CleanConfig {
    pub window_size: usize,
    pub zero_threshold: f64,
    pub min_len: usize,
}

impl Default for CleanConfig {
    fn default() -> Self {
        Self {
            window_size: DEFAULT_WINDOW,
            zero_threshold: DEFAULT_ZERO_THRESHOLD,
            min_len: DEFAULT_MIN_LEN,
        }
    }
}

/// Maximal finite runs of length at least `min_len`, in order.
pub fn split_by_nan_inf<T: Real>(seq: &[T], min_len: usize) -> Vec<Segment<T>> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, v) in seq.iter().enumerate() {
        if !v.is_finite() {
            if i - start >= min_len && i > start {
                out.push(Segment { start, values: seq[start..i].to_vec() });
            }
            start = i + 1;
        }
    }
    if seq.len() > start && seq.len() - start >= min_len {
        out.push(Segment { start, values: seq[start..].to_vec() });
    }
    out
}

fn ratio(count: usize, len: usize) -> Option<f64> {
    (len > 0).then(|| count as f64 / len as f64)
}

fn exceeds(r: Option<f64>, threshold: f64) -> bool {
    r.is_some_and(|r| r > threshold)
}

/// Quality check on one window: fails on any non-finite point, or when the
/// share of exact zeros among values, first differences or lag-2 differences
/// exceeds `zero_threshold`.
pub fn check_window<T: Real>(window: &[T], zero_threshold: f64) -> (bool, WindowDiagnostics) {
    let mut info = WindowDiagnostics {
        nan_count: window.iter().filter(|v| v.is_nan()).count(),
        ..Default::default()
    };
    if info.nan_count > 0 {
        return (false, info);
    }
    let inf = window.iter().filter(|v| v.is_infinite()).count();
    info.inf_count = Some(inf);
    if inf > 0 {
        return (false, info);
    }
    let n = window.len();
    let zero = T::zero();
    info.zero_ratio = ratio(window.iter().filter(|&&v| v == zero).count(), n);
    let lag_zeros = |lag: usize| {
        let m = n.saturating_sub(lag);
        let c = (0..m).filter(|&t| window[t + lag] - window[t] == zero).count();
        ratio(c, m)
    };
    info.first_diff_zero_ratio = lag_zeros(1);
    info.second_diff_zero_ratio = lag_zeros(2);
    let pass = !exceeds(info.zero_ratio, zero_threshold)
        && !exceeds(info.first_diff_zero_ratio, zero_threshold)
        && !exceeds(info.second_diff_zero_ratio, zero_threshold);
    (pass, info)
}

/// `check_window` for data that carries a shape; anything other than a
/// single axis is rejected.
pub fn check_window_shaped<T: Real>(
    data: &[T],
    shape: &[usize],
    zero_threshold: f64,
) -> Result<(bool, WindowDiagnostics)> {
    if shape.len() > 1 {
        return Err(Error::Usage(format!("window must be one-dimensional, got shape {shape:?}")));
    }
    Ok(check_window(data, zero_threshold))
}

/// Scans non-overlapping windows; the last window runs to the end of the
/// input, so it holds between `window_size` and `2·window_size − 1` points.
/// Consecutive passing windows are joined and runs of at least `min_len` are
/// kept. Inputs no longer than one window are kept or dropped whole.
pub fn split_by_window_quality<T: Real>(
    seq: &[T],
    window_size: usize,
    zero_threshold: f64,
    min_len: usize,
) -> Vec<Segment<T>> {
    let window_size = window_size.max(1);
    if seq.len() <= window_size {
        return if check_window(seq, zero_threshold).0 {
            vec![Segment { start: 0, values: seq.to_vec() }]
        } else {
            Vec::new()
        };
    }
    let mut out = Vec::new();
    let mut run: Option<(usize, usize)> = None;
    let flush = |run: &mut Option<(usize, usize)>, out: &mut Vec<Segment<T>>| {
        if let Some((s, e)) = run.take() {
            if e - s >= min_len {
                out.push(Segment { start: s, values: seq[s..e].to_vec() });
            }
        }
    };
    let mut i = window_size;
    loop {
        let (lo, hi) = if i + window_size > seq.len() {
            let lo = i - window_size;
            i = seq.len();
            (lo, seq.len())
        } else {
            (i - window_size, i)
        };
        if check_window(&seq[lo..hi], zero_threshold).0 {
            run = Some(match run {
                Some((s, _)) => (s, hi),
                None => (lo, hi),
            });
        } else {
            flush(&mut run, &mut out);
        }
        if i >= seq.len() {
            break;
        }
        i += window_size;
    }
    flush(&mut run, &mut out);
    out
}

/// Full curation of one raw series: values are narrowed to the stored
/// precision (anything outside the f32 range becomes a gap), split at gaps,
/// then split by window quality. `min_len` applies to both stages.
pub fn clean_series(raw: &RawSeries, cfg: &CleanConfig) -> Vec<CleanSeries> {
    let narrowed: Vec<f32> = raw.values.iter().map(|&v| v as f32).collect();
    let mut out = Vec::new();
    for seg in split_by_nan_inf(&narrowed, cfg.min_len.max(1)) {
        for sub in split_by_window_quality(&seg.values, cfg.window_size, cfg.zero_threshold, cfg.min_len) {
            out.push(CleanSeries {
                values: sub.values,
                origin: Origin {
                    source: raw.source.clone(),
                    domain: raw.domain.clone(),
                    start: seg.start + sub.start,
                },
            });
        }
    }
    out
}

impl CleanSeries {
    /// Whether this series satisfies the guarantees of `clean_series` under `cfg`.
    pub fn is_valid(&self, cfg: &CleanConfig) -> bool {
        let v = &self.values;
        if v.iter().any(|x| !x.is_finite()) || v.len() < cfg.min_len.max(1) {
            return false;
        }
        let w = cfg.window_size.max(1);
        if v.len() <= w {
            return check_window(v, cfg.zero_threshold).0;
        }
        let mut lo = 0;
        while lo < v.len() {
            let hi = if lo + 2 * w > v.len() { v.len() } else { lo + w };
            if !check_window(&v[lo..hi], cfg.zero_threshold).0 {
                return false;
            }
            lo = hi;
        }
        true
    }
}
