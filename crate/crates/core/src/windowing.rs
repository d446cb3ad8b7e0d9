//! Two-stage audio windowing: a frame ring feeding a mono sample ring from
//! which fixed-length analysis windows are cut.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};

use crossbeam_queue::ArrayQueue;
use thiserror::Error;

use crate::frames::AudioFrame;

pub const DEFAULT_WINDOW_SAMPLES: usize = 47 * 1024;
pub const DEFAULT_SAMPLE_RATE_HZ: u32 = 48_000;
pub const DEFAULT_FRAME_RING_CAPACITY: usize = 64;
/// Sample ring capacity as a multiple of the window length.
pub const SAMPLE_RING_WINDOWS: usize = 4;

const TICKS_PER_SECOND: u128 = 10_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WindowError {
    /// The stage has been flushed and now accumulates at `actual`.
    #[error("sample rate changed from {expected} Hz to {actual} Hz; window stage reset")]
    RateMismatch { expected: u32, actual: u32 },
    #[error("invalid window config: {0}")]
    InvalidConfig(String),
}

/// Ring one: bounded store of intercepted audio frames.
///
/// Pushing into a full ring evicts the oldest frame. Safe for one producer and
/// one consumer on different threads.
pub struct FrameRing {
    queue: ArrayQueue<AudioFrame>,
    dropped: AtomicU64,
}

impl FrameRing {
    pub fn new(capacity: usize) -> Self {
        FrameRing { queue: ArrayQueue::new(capacity.max(1)), dropped: AtomicU64::new(0) }
    }

    pub fn push(&self, frame: AudioFrame) {
        if self.queue.force_push(frame).is_some() {
            self.dropped.fetch_add(1, Ordering::Relaxed);
        }
    }

    pub fn pop(&self) -> Option<AudioFrame> {
        self.queue.pop()
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.queue.capacity()
    }

    pub fn dropped_frames(&self) -> u64 {
        self.dropped.load(Ordering::Relaxed)
    }

    pub fn clear(&self) {
        while self.queue.pop().is_some() {}
    }
}

impl Default for FrameRing {
    fn default() -> Self {
        FrameRing::new(DEFAULT_FRAME_RING_CAPACITY)
    }
}

/// Ring two: the most recent mono samples.
#[derive(Debug, Clone)]
pub struct SampleRing {
    buf: Vec<f32>,
    write: usize,
    total_written: u64,
    /// Samples before this were lost before the last grow.
    floor: u64,
}

impl SampleRing {
    pub fn new(capacity: usize) -> Self {
        SampleRing { buf: vec![0.0; capacity.max(1)], write: 0, total_written: 0, floor: 0 }
    }

    pub fn capacity(&self) -> usize {
        self.buf.len()
    }

    pub fn total_written(&self) -> u64 {
        self.total_written
    }

    /// Absolute index of the oldest retained sample.
    pub fn oldest_retained(&self) -> u64 {
        self.total_written.saturating_sub(self.buf.len() as u64).max(self.floor)
    }

    pub fn push(&mut self, samples: &[f32]) {
        let cap = self.buf.len();
        // Only the tail of an oversized block survives.
        let skip = samples.len().saturating_sub(cap);
        if skip > 0 {
            self.write = (self.write + skip) % cap;
        }
        let mut rest = &samples[skip..];
        while !rest.is_empty() {
            let n = rest.len().min(cap - self.write);
            self.buf[self.write..self.write + n].copy_from_slice(&rest[..n]);
            self.write = (self.write + n) % cap;
            rest = &rest[n..];
        }
        self.total_written += samples.len() as u64;
    }

    /// Copies samples `[start, start + out.len())` in temporal order.
    /// Returns false, leaving `out` untouched, if any are no longer retained
    /// or not yet written.
    pub fn copy_range(&self, start: u64, out: &mut [f32]) -> bool {
        let end = start + out.len() as u64;
        if start < self.oldest_retained() || end > self.total_written {
            return false;
        }
        // `write` always equals `total_written % cap`.
        let cap = self.buf.len();
        let mut pos = (start % cap as u64) as usize;
        let mut filled = 0;
        while filled < out.len() {
            let n = (out.len() - filled).min(cap - pos);
            out[filled..filled + n].copy_from_slice(&self.buf[pos..pos + n]);
            filled += n;
            pos = (pos + n) % cap;
        }
        true
    }

    pub fn clear(&mut self) {
        self.write = 0;
        self.total_written = 0;
        self.floor = 0;
    }

    /// Enlarges the ring to at least `capacity`, keeping retained samples.
    pub fn grow(&mut self, capacity: usize) {
        let old_cap = self.buf.len();
        if capacity <= old_cap {
            return;
        }
        let oldest = self.oldest_retained();
        let mut kept = vec![0f32; (self.total_written - oldest) as usize];
        self.copy_range(oldest, &mut kept);
        self.buf = vec![0.0; capacity];
        for (i, x) in kept.into_iter().enumerate() {
            self.buf[((oldest + i as u64) % capacity as u64) as usize] = x;
        }
        self.write = (self.total_written % capacity as u64) as usize;
        self.floor = oldest;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Downmix {
    /// Per-sample mean across channels.
    #[default]
    Average,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowConfig {
    pub window_samples: usize,
    /// Distance between successive window ends. Equal to `window_samples`
    /// for tumbling windows.
    pub hop_samples: usize,
    pub sample_rate_hz: u32,
    pub downmix: Downmix,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            window_samples: DEFAULT_WINDOW_SAMPLES,
            hop_samples: DEFAULT_WINDOW_SAMPLES,
            sample_rate_hz: DEFAULT_SAMPLE_RATE_HZ,
            downmix: Downmix::Average,
        }
    }
}

impl WindowConfig {
    pub fn tumbling(window_samples: usize) -> Self {
        WindowConfig { window_samples, hop_samples: window_samples, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), WindowError> {
        if self.window_samples == 0 {
            return Err(WindowError::InvalidConfig("window_samples must be positive".into()));
        }
        if self.hop_samples == 0 || self.hop_samples > self.window_samples {
            return Err(WindowError::InvalidConfig(format!(
                "hop_samples must be in 1..={}, got {}",
                self.window_samples, self.hop_samples
            )));
        }
        if self.sample_rate_hz == 0 {
            return Err(WindowError::InvalidConfig("sample_rate_hz must be positive".into()));
        }
        if !self.window_samples.is_multiple_of(1024) {
            log::warn!(
                "window_samples {} is not a multiple of 1024; windows will straddle frames",
                self.window_samples
            );
        }
        Ok(())
    }

    pub fn window_seconds(&self) -> f64 {
        self.window_samples as f64 / self.sample_rate_hz as f64
    }
}

/// A fixed-length mono block handed to a tagger.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleWindow {
    pub samples: Vec<f32>,
    /// Timestamp of the first contributing sample.
    pub start_timestamp_100ns: u64,
    pub sample_rate_hz: u32,
}

impl SampleWindow {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_100ns(&self) -> u64 {
        samples_to_ticks(self.samples.len() as u64, self.sample_rate_hz)
    }

    pub fn end_timestamp_100ns(&self) -> u64 {
        self.start_timestamp_100ns.saturating_add(self.duration_100ns())
    }
}

pub fn samples_to_ticks(samples: u64, rate_hz: u32) -> u64 {
    (samples as u128 * TICKS_PER_SECOND / rate_hz.max(1) as u128) as u64
}

/// Reduces a planar frame to mono. Output length is `samples_per_channel`.
pub fn extract_samples(frame: &AudioFrame, policy: Downmix) -> Vec<f32> {
    let n = frame.samples_per_channel as usize;
    let channels = frame.channels as usize;
    if channels == 1 {
        return frame.samples[..n].to_vec();
    }
    match policy {
        Downmix::Average => {
            let mut acc = vec![0f64; n];
            for ch in 0..channels {
                for (a, s) in acc.iter_mut().zip(frame.channel(ch)) {
                    *a += *s as f64;
                }
            }
            let scale = 1.0 / channels as f64;
            acc.into_iter().map(|a| (a * scale) as f32).collect()
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Segment {
    start: u64,
    timestamp_100ns: u64,
}

/// Cuts windows from the sample ring at every hop boundary.
#[derive(Debug, Clone)]
pub struct Windower {
    cfg: WindowConfig,
    rate: u32,
    ring: SampleRing,
    next_end: u64,
    segments: VecDeque<Segment>,
    last_start_ts: Option<u64>,
    emitted: u64,
    skipped: u64,
}

impl Windower {
    pub fn new(cfg: WindowConfig) -> Result<Self, WindowError> {
        cfg.validate()?;
        let capacity = cfg.window_samples * SAMPLE_RING_WINDOWS;
        Ok(Windower {
            rate: cfg.sample_rate_hz,
            ring: SampleRing::new(capacity),
            next_end: cfg.window_samples as u64,
            segments: VecDeque::new(),
            last_start_ts: None,
            emitted: 0,
            skipped: 0,
            cfg,
        })
    }

    pub fn config(&self) -> &WindowConfig {
        &self.cfg
    }

    /// Current accumulation rate; differs from the configured rate after a
    /// mid-stream rate change.
    pub fn sample_rate_hz(&self) -> u32 {
        self.rate
    }

    pub fn total_samples(&self) -> u64 {
        self.ring.total_written()
    }

    pub fn windows_emitted(&self) -> u64 {
        self.emitted
    }

    /// Windows whose samples were overwritten before being taken.
    pub fn windows_skipped(&self) -> u64 {
        self.skipped
    }

    /// Downmixes `frame` into the sample ring.
    ///
    /// A frame at a different sample rate flushes all accumulated samples,
    /// restarts accumulation at the new rate with this frame, and reports
    /// [`WindowError::RateMismatch`]. The frame is not lost.
    pub fn push_frame(&mut self, frame: &AudioFrame) -> Result<(), WindowError> {
        let mut result = Ok(());
        if frame.sample_rate_hz != self.rate {
            result = Err(WindowError::RateMismatch { expected: self.rate, actual: frame.sample_rate_hz });
            self.reset(frame.sample_rate_hz);
        }
        let mono = extract_samples(frame, self.cfg.downmix);
        // A pending window plus this frame must fit without eviction.
        self.ring.grow(self.cfg.window_samples + mono.len());
        self.segments.push_back(Segment { start: self.ring.total_written(), timestamp_100ns: frame.timestamp_100ns });
        self.ring.push(&mono);
        self.prune_segments();
        result
    }

    /// Flushes all state and accumulates at `rate_hz` from now on.
    pub fn reset(&mut self, rate_hz: u32) {
        self.rate = rate_hz;
        self.ring.clear();
        self.segments.clear();
        self.next_end = self.cfg.window_samples as u64;
    }

    /// Returns the next window if its end boundary has been reached.
    pub fn try_take_window(&mut self) -> Option<SampleWindow> {
        let window = self.cfg.window_samples as u64;
        let hop = self.cfg.hop_samples as u64;
        if self.ring.total_written() < self.next_end {
            return None;
        }
        let oldest = self.ring.oldest_retained();
        if self.next_end - window < oldest {
            let behind = oldest - (self.next_end - window);
            let hops = behind.div_ceil(hop);
            self.next_end += hops * hop;
            self.skipped += hops;
            if self.ring.total_written() < self.next_end {
                return None;
            }
        }
        let start = self.next_end - window;
        let mut samples = vec![0f32; window as usize];
        let copied = self.ring.copy_range(start, &mut samples);
        debug_assert!(copied);
        let mut ts = self.timestamp_of(start);
        if let Some(prev) = self.last_start_ts {
            if ts <= prev {
                ts = prev + 1;
            }
        }
        self.last_start_ts = Some(ts);
        self.next_end += hop;
        self.emitted += 1;
        Some(SampleWindow { samples, start_timestamp_100ns: ts, sample_rate_hz: self.rate })
    }

    /// Moves every frame out of `ring` and returns all windows that became
    /// ready, in order. Rate changes are logged and absorbed.
    pub fn drain(&mut self, ring: &FrameRing) -> Vec<SampleWindow> {
        let mut out = Vec::new();
        while let Some(frame) = ring.pop() {
            if let Err(e) = self.push_frame(&frame) {
                log::warn!("{e}");
            }
            while let Some(w) = self.try_take_window() {
                out.push(w);
            }
        }
        out
    }

    fn timestamp_of(&self, sample: u64) -> u64 {
        let seg = self.segments.iter().rev().find(|s| s.start <= sample).or_else(|| self.segments.front());
        match seg {
            Some(s) => {
                let offset = sample.saturating_sub(s.start);
                s.timestamp_100ns.saturating_add(samples_to_ticks(offset, self.rate))
            }
            None => 0,
        }
    }

    fn prune_segments(&mut self) {
        let oldest = self.ring.oldest_retained();
        while self.segments.len() > 1 && self.segments[1].start <= oldest {
            self.segments.pop_front();
        }
    }
}
