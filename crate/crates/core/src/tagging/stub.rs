//! Load-generating taggers for exercising the relay and the bench harness.

use std::hint::black_box;
use std::time::Duration;

use super::{TagError, TagPrediction, Tagger};

/// Sleeps for a fixed time, then reports silence.
pub struct SleepTagger {
    delay: Duration,
    labels: Vec<String>,
}

impl SleepTagger {
    pub fn new(delay: Duration) -> Self {
        SleepTagger { delay, labels: vec!["Silence".into()] }
    }
}

impl Tagger for SleepTagger {
    fn name(&self) -> &str {
        "sleep"
    }

    fn label_set(&self) -> &[String] {
        &self.labels
    }

    fn predict(&mut self, _samples: &[f32], _rate: u32) -> Result<Vec<TagPrediction>, TagError> {
        if !self.delay.is_zero() {
            std::thread::sleep(self.delay);
        }
        Ok(vec![TagPrediction::new("Silence", 1.0)])
    }
}

/// Burns CPU proportional to `passes × window length`.
///
/// Two instances differing only in `passes` give a controlled cost ratio.
pub struct WorkTagger {
    passes: u32,
    labels: Vec<String>,
}

impl WorkTagger {
    pub fn new(passes: u32) -> Self {
        WorkTagger { passes: passes.max(1), labels: vec!["Work".into()] }
    }
}

impl Tagger for WorkTagger {
    fn name(&self) -> &str {
        "work"
    }

    fn label_set(&self) -> &[String] {
        &self.labels
    }

    fn predict(&mut self, samples: &[f32], _rate: u32) -> Result<Vec<TagPrediction>, TagError> {
        let mut acc = 0.0f64;
        for pass in 0..self.passes {
            let gain = 1.0 + pass as f64 * 1e-3;
            for &s in black_box(samples) {
                acc = (acc * 0.999_9 + s as f64 * gain).sin();
            }
        }
        let score = black_box(acc).abs().min(1.0);
        Ok(vec![TagPrediction::new("Work", score)])
    }
}
