//! Tagger latency as a function of buffer size.

use std::io::{self, BufRead, Write};
use std::time::Instant;

use thiserror::Error;

use crate::sources::{render, Signal, SignalSpec};
use crate::tagging::{TagError, Tagger, TaggerSpec, TaggingStage};
use crate::windowing::SampleWindow;

pub const CSV_HEADER: &str = "buffer_samples,window_seconds,mean_ms,median_ms,p95_ms,min_ms,max_ms";

#[derive(Debug, Clone, PartialEq)]
pub struct BenchPlan {
    pub buffer_sizes: Vec<usize>,
    pub repetitions: usize,
    /// Untimed runs before each size.
    pub warmup: usize,
    pub signal: Signal,
    pub sample_rate_hz: u32,
    pub tagger: TaggerSpec,
}

impl Default for BenchPlan {
    fn default() -> Self {
        BenchPlan {
            buffer_sizes: default_sizes(),
            repetitions: 30,
            warmup: 3,
            signal: Signal::Sine { freq_hz: 440.0, amplitude: 0.5 },
            sample_rate_hz: 48_000,
            tagger: TaggerSpec::Reference,
        }
    }
}

/// 1024, 2048, ..., 96 · 1024.
pub fn default_sizes() -> Vec<usize> {
    (1..=96).map(|k| k * 1024).collect()
}

impl BenchPlan {
    pub fn validate(&self) -> Result<(), String> {
        if self.buffer_sizes.is_empty() {
            return Err("no buffer sizes".into());
        }
        if let Some(bad) = self.buffer_sizes.iter().find(|s| **s == 0) {
            return Err(format!("buffer size {bad} must be positive"));
        }
        if self.repetitions == 0 {
            return Err("repetitions must be at least 1".into());
        }
        if self.sample_rate_hz == 0 {
            return Err("sample rate must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyRecord {
    pub buffer_samples: usize,
    pub window_seconds: f64,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
}

impl LatencyRecord {
    /// Aggregates raw timings. `timings_ms` must not be empty.
    pub fn from_timings(buffer_samples: usize, sample_rate_hz: u32, timings_ms: &[f64]) -> Self {
        let mut t = timings_ms.to_vec();
        t.sort_by(f64::total_cmp);
        let n = t.len();
        let median = if n % 2 == 1 { t[n / 2] } else { (t[n / 2 - 1] + t[n / 2]) / 2.0 };
        let p95_rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
        LatencyRecord {
            buffer_samples,
            window_seconds: buffer_samples as f64 / sample_rate_hz as f64,
            mean_ms: t.iter().sum::<f64>() / n as f64,
            median_ms: median,
            p95_ms: t[p95_rank - 1],
            min_ms: t[0],
            max_ms: t[n - 1],
        }
    }
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    /// The records gathered before the failure are kept.
    #[error("tagger failed at {buffer_samples} samples: {source}")]
    Tagger { buffer_samples: usize, source: TagError, partial: Vec<LatencyRecord> },
}

pub fn run_bench(plan: &BenchPlan) -> Result<Vec<LatencyRecord>, BenchError> {
    run_bench_with(plan, plan.tagger.build())
}

/// Runs `plan` against an already-built tagger, one size at a time on the
/// calling thread. Records come back sorted by buffer size.
pub fn run_bench_with(plan: &BenchPlan, tagger: Box<dyn Tagger>) -> Result<Vec<LatencyRecord>, BenchError> {
    plan.validate().map_err(BenchError::InvalidPlan)?;
    let mut sizes = plan.buffer_sizes.clone();
    sizes.sort_unstable();
    sizes.dedup();
    let mut stage = TaggingStage::new(tagger, None, usize::MAX);
    let mut records = Vec::with_capacity(sizes.len());
    for size in sizes {
        let spec = SignalSpec {
            signal: plan.signal.clone(),
            duration_s: size as f64 / plan.sample_rate_hz as f64,
            sample_rate_hz: plan.sample_rate_hz,
            channels: 1,
        };
        let mut samples = render(&spec).samples;
        samples.resize(size, 0.0);
        let window = SampleWindow { samples, start_timestamp_100ns: 0, sample_rate_hz: plan.sample_rate_hz };
        let mut timings = Vec::with_capacity(plan.repetitions);
        for rep in 0..plan.warmup + plan.repetitions {
            let started = Instant::now();
            let outcome = stage.tag(&window);
            let ms = started.elapsed().as_secs_f64() * 1e3;
            if let Err(source) = outcome {
                return Err(BenchError::Tagger { buffer_samples: size, source, partial: records });
            }
            if rep >= plan.warmup {
                timings.push(ms);
            }
        }
        let rec = LatencyRecord::from_timings(size, plan.sample_rate_hz, &timings);
        log::debug!("{size} samples: median {:.3} ms", rec.median_ms);
        records.push(rec);
    }
    Ok(records)
}

/// Formats `x` with six significant digits, without exponent notation.
pub fn sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let magnitude = x.abs().log10().floor() as i32;
    let decimals = (5 - magnitude).max(0) as usize;
    let rounded = format!("{x:.decimals$}");
    // Rounding can carry into a new digit (9.999995 -> 10.00000).
    if rounded.contains('.') {
        rounded.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        rounded
    }
}

pub fn write_csv<W: Write>(records: &[LatencyRecord], tagger: &str, host: &str, mut out: W) -> io::Result<()> {
    writeln!(out, "# tagger={tagger}")?;
    writeln!(out, "# host={host}")?;
    writeln!(out, "{CSV_HEADER}")?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.buffer_samples,
            sig6(r.window_seconds),
            sig6(r.mean_ms),
            sig6(r.median_ms),
            sig6(r.p95_ms),
            sig6(r.min_ms),
            sig6(r.max_ms)
        )?;
    }
    out.flush()
}

pub fn read_csv<R: BufRead>(input: R) -> io::Result<Vec<LatencyRecord>> {
    let bad = |msg: String| io::Error::new(io::ErrorKind::InvalidData, msg);
    let mut records = Vec::new();
    let mut saw_header = false;
    for line in input.lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !saw_header {
            if line != CSV_HEADER {
                return Err(bad(format!("unexpected header {line:?}")));
            }
            saw_header = true;
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(bad(format!("expected 7 fields in {line:?}")));
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad(format!("bad number {:?}", f[i])));
        records.push(LatencyRecord {
            buffer_samples: f[0].parse().map_err(|_| bad(format!("bad size {:?}", f[0])))?,
            window_seconds: num(1)?,
            mean_ms: num(2)?,
            median_ms: num(3)?,
            p95_ms: num(4)?,
            min_ms: num(5)?,
            max_ms: num(6)?,
        });
    }
    if !saw_header {
        return Err(bad("missing header".into()));
    }
    Ok(records)
}

/// Ranks starting at 1, ties sharing their mean rank.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            out[idx[k]] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation: Pearson correlation of the ranks. `None` for
/// fewer than two points or a constant series.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Correlation between buffer size and median latency.
pub fn size_latency_trend(records: &[LatencyRecord]) -> Option<f64> {
    let sizes: Vec<f64> = records.iter().map(|r| r.buffer_samples as f64).collect();
    let medians: Vec<f64> = records.iter().map(|r| r.median_ms).collect();
    spearman(&sizes, &medians)
}

/// CPU model, logical core count and OS, for the CSV preamble.
pub fn host_descriptor() -> String {
    let cpuinfo = std::fs::read_to_string("/proc/cpuinfo").unwrap_or_default();
    let model = cpuinfo
        .lines()
        .find_map(|l| l.strip_prefix("model name").and_then(|r| r.split_once(':')).map(|(_, v)| v.trim().to_string()))
        .unwrap_or_else(|| std::env::consts::ARCH.to_string());
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    format!("{model}; {cores} logical cores; {}", std::env::consts::OS)
}
