//! Deterministic spectral tagger used when no neural model is attached.
//!
//! Decision rule, applied to the whole window with a rectangular taper:
//!
//! 1. `rms < silence_rms_threshold` gives `Silence` with score 1.
//! 2. Otherwise the one-sided power spectrum `|X[k]|^2` is restricted to bins
//!    with frequency in `[20, 8000)` Hz. If the spectral flatness (geometric
//!    over arithmetic mean, each bin floored by [`POWER_FLOOR`]) exceeds
//!    `flatness_threshold` the window is `Noise`, scored by its flatness.
//! 3. Otherwise each tone band scores its share of the summed power of the
//!    three bands.

use std::sync::Arc;

use rustfft::algorithm::BluesteinsAlgorithm;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{TagError, TagPrediction, Tagger};

pub const SILENCE: &str = "Silence";
pub const TONE_LOW: &str = "ToneLow";
pub const TONE_MID: &str = "ToneMid";
pub const TONE_HIGH: &str = "ToneHigh";
pub const NOISE: &str = "Noise";

/// `(label, low_hz, high_hz)`, half-open.
pub const TONE_BANDS: [(&str, f64, f64); 3] =
    [(TONE_LOW, 20.0, 250.0), (TONE_MID, 250.0, 2000.0), (TONE_HIGH, 2000.0, 8000.0)];
pub const ANALYSIS_LOW_HZ: f64 = 20.0;
pub const ANALYSIS_HIGH_HZ: f64 = 8000.0;
/// Added to every bin power before the flatness ratio so empty bins do not
/// send the geometric mean to zero.
pub const POWER_FLOOR: f64 = 1e-20;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceConfig {
    pub silence_rms_threshold: f64,
    pub flatness_threshold: f64,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        ReferenceConfig { silence_rms_threshold: 1e-4, flatness_threshold: 0.5 }
    }
}

/// Intermediate quantities behind one decision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralSummary {
    pub rms: f64,
    /// Zero when the window resolves no bins inside the analysis range.
    pub flatness: f64,
    pub band_power: [f64; 3],
    pub analysed_bins: usize,
}

/// Smallest `m >= n` whose only prime factors are 2, 3 and 5.
pub fn next_smooth(n: usize) -> usize {
    let mut best = n.max(1).next_power_of_two();
    let mut p5 = 1;
    while p5 < best {
        let mut p35 = p5;
        while p35 < best {
            let mut m = p35;
            while m < n {
                m *= 2;
            }
            best = best.min(m);
            p35 *= 3;
        }
        p5 *= 5;
    }
    best
}

/// Frequency of one-sided bin `k` for an `n`-point transform.
pub fn bin_frequency(k: usize, n: usize, rate_hz: u32) -> f64 {
    k as f64 * rate_hz as f64 / n as f64
}

pub struct ReferenceSpectralTagger {
    config: ReferenceConfig,
    labels: Vec<String>,
    planner: FftPlanner<f64>,
    plan: Option<(usize, Arc<dyn Fft<f64>>)>,
    buf: Vec<Complex<f64>>,
}

impl Default for ReferenceSpectralTagger {
    fn default() -> Self {
        ReferenceSpectralTagger::new(ReferenceConfig::default())
    }
}

impl ReferenceSpectralTagger {
    pub fn new(config: ReferenceConfig) -> Self {
        ReferenceSpectralTagger {
            config,
            labels: [SILENCE, TONE_LOW, TONE_MID, TONE_HIGH, NOISE].iter().map(|s| s.to_string()).collect(),
            planner: FftPlanner::new(),
            plan: None,
            buf: Vec::new(),
        }
    }

    pub fn config(&self) -> &ReferenceConfig {
        &self.config
    }

    pub fn analyze(&mut self, samples: &[f32], rate_hz: u32) -> SpectralSummary {
        let n = samples.len();
        let rms = if n == 0 {
            0.0
        } else {
            (samples.iter().map(|&s| (s as f64) * (s as f64)).sum::<f64>() / n as f64).sqrt()
        };
        let mut summary = SpectralSummary { rms, flatness: 0.0, band_power: [0.0; 3], analysed_bins: 0 };
        if n == 0 || rms < self.config.silence_rms_threshold {
            return summary;
        }

        let fft = match &self.plan {
            Some((len, fft)) if *len == n => Arc::clone(fft),
            _ => {
                // Chirp-z over a 5-smooth transform: cost grows with the
                // length alone, not with how it factors.
                let inner = self.planner.plan_fft_forward(next_smooth(2 * n - 1));
                let fft: Arc<dyn Fft<f64>> = Arc::new(BluesteinsAlgorithm::new(n, inner));
                self.plan = Some((n, Arc::clone(&fft)));
                fft
            }
        };
        self.buf.clear();
        self.buf.extend(samples.iter().map(|&s| Complex::new(s as f64, 0.0)));
        fft.process(&mut self.buf);

        let mut log_sum = 0.0;
        let mut lin_sum = 0.0;
        for k in 0..=n / 2 {
            let f = bin_frequency(k, n, rate_hz);
            if !(ANALYSIS_LOW_HZ..ANALYSIS_HIGH_HZ).contains(&f) {
                continue;
            }
            let p = self.buf[k].norm_sqr();
            let floored = p + POWER_FLOOR;
            log_sum += floored.ln();
            lin_sum += floored;
            summary.analysed_bins += 1;
            if let Some(b) = TONE_BANDS.iter().position(|(_, lo, hi)| f >= *lo && f < *hi) {
                summary.band_power[b] += p;
            }
        }
        if summary.analysed_bins > 0 {
            let m = summary.analysed_bins as f64;
            summary.flatness = ((log_sum / m).exp() / (lin_sum / m)).clamp(0.0, 1.0);
        }
        summary
    }

    /// Applies the decision rule to an already computed summary.
    pub fn decide(&self, s: &SpectralSummary) -> Vec<TagPrediction> {
        if s.rms < self.config.silence_rms_threshold {
            return vec![TagPrediction::new(SILENCE, 1.0)];
        }
        if s.analysed_bins == 0 {
            return Vec::new();
        }
        let total: f64 = s.band_power.iter().sum();
        if s.flatness > self.config.flatness_threshold || total <= 0.0 {
            return vec![TagPrediction::new(NOISE, s.flatness)];
        }
        let mut preds: Vec<TagPrediction> = TONE_BANDS
            .iter()
            .zip(s.band_power)
            .map(|((label, _, _), p)| TagPrediction::new(*label, p / total))
            .collect();
        super::rank_predictions(&mut preds);
        preds
    }
}

impl Tagger for ReferenceSpectralTagger {
    fn name(&self) -> &str {
        "reference"
    }

    fn label_set(&self) -> &[String] {
        &self.labels
    }

    fn predict(&mut self, samples: &[f32], sample_rate_hz: u32) -> Result<Vec<TagPrediction>, TagError> {
        if sample_rate_hz == 0 {
            return Err(TagError::ContractViolation("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(TagError::ContractViolation(format!("non-finite sample at {i}")));
        }
        let summary = self.analyze(samples, sample_rate_hz);
        Ok(self.decide(&summary))
    }
}
