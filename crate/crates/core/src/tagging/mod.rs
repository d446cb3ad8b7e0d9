//! Audio taggers and the metadata they publish.
//!
//! A [`Tagger`] turns one mono window into scored labels. [`TaggingStage`]
//! wraps a tagger with the window-length contract, timing, ranking and top-k
//! truncation, producing a [`TagResult`] that [`xml::build_metadata_xml`]
//! serialises into a metadata frame.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::windowing::SampleWindow;

pub mod external;
pub mod reference;
pub mod stub;
pub mod xml;

pub use external::ExternalTagger;
pub use reference::{ReferenceConfig, ReferenceSpectralTagger};
pub use xml::{build_metadata_xml, parse_metadata_xml, ParsedTags, XmlError};

pub const DEFAULT_TOP_K: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TagError {
    #[error("contract violation: {0}")]
    ContractViolation(String),
    #[error("tagger unavailable: {0}")]
    TaggerUnavailable(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TagPrediction {
    pub label: String,
    pub score: f64,
}

impl TagPrediction {
    pub fn new(label: impl Into<String>, score: f64) -> Self {
        TagPrediction { label: label.into(), score }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TagResult {
    /// Descending by score, ties broken by label.
    pub predictions: Vec<TagPrediction>,
    pub window_start_timestamp_100ns: u64,
    pub window_samples: usize,
    pub sample_rate_hz: u32,
    pub inference_ms: f64,
}

impl TagResult {
    pub fn top(&self) -> Option<&TagPrediction> {
        self.predictions.first()
    }
}

/// Sorts descending by score with a lexicographic tie-break.
pub fn rank_predictions(preds: &mut [TagPrediction]) {
    preds.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.label.cmp(&b.label)));
}

pub trait Tagger: Send {
    fn name(&self) -> &str;

    /// Labels this tagger may emit. Empty when the set is open, as for an
    /// external model.
    fn label_set(&self) -> &[String];

    /// Scores one mono window. Must be a pure function of the samples.
    fn predict(&mut self, samples: &[f32], sample_rate_hz: u32) -> Result<Vec<TagPrediction>, TagError>;
}

impl<T: Tagger + ?Sized> Tagger for Box<T> {
    fn name(&self) -> &str {
        (**self).name()
    }

    fn label_set(&self) -> &[String] {
        (**self).label_set()
    }

    fn predict(&mut self, samples: &[f32], sample_rate_hz: u32) -> Result<Vec<TagPrediction>, TagError> {
        (**self).predict(samples, sample_rate_hz)
    }
}

/// A tagger bound to a window length and a top-k cut.
pub struct TaggingStage {
    tagger: Box<dyn Tagger>,
    window_samples: Option<usize>,
    top_k: usize,
}

impl TaggingStage {
    /// `window_samples = None` accepts windows of any length.
    pub fn new(tagger: Box<dyn Tagger>, window_samples: Option<usize>, top_k: usize) -> Self {
        TaggingStage { tagger, window_samples, top_k: top_k.max(1) }
    }

    pub fn tagger(&self) -> &dyn Tagger {
        self.tagger.as_ref()
    }

    pub fn tag(&mut self, window: &SampleWindow) -> Result<TagResult, TagError> {
        if let Some(expected) = self.window_samples {
            if window.len() != expected {
                return Err(TagError::ContractViolation(format!(
                    "window has {} samples, stage expects {expected}",
                    window.len()
                )));
            }
        }
        let started = Instant::now();
        let mut predictions = self.tagger.predict(&window.samples, window.sample_rate_hz)?;
        let inference_ms = started.elapsed().as_secs_f64() * 1e3;

        let labels = self.tagger.label_set();
        for p in &mut predictions {
            if !p.score.is_finite() {
                return Err(TagError::ContractViolation(format!("non-finite score for {}", p.label)));
            }
            if !labels.is_empty() && !labels.contains(&p.label) {
                return Err(TagError::ContractViolation(format!("label {:?} outside label set", p.label)));
            }
            p.score = p.score.clamp(0.0, 1.0);
        }
        rank_predictions(&mut predictions);
        predictions.truncate(self.top_k);
        Ok(TagResult {
            predictions,
            window_start_timestamp_100ns: window.start_timestamp_100ns,
            window_samples: window.len(),
            sample_rate_hz: window.sample_rate_hz,
            inference_ms,
        })
    }
}

/// Which tagger to run, as written on the command line or in `TSRM_TAGGER`.
///
/// `reference`, `sleep:<ms>`, `work:<passes>` or `external:<shell command>`.
#[derive(Debug, Clone, PartialEq, Eq)]
#[derive(Default)]
pub enum TaggerSpec {
    #[default]
    Reference,
    Sleep(Duration),
    Work(u32),
    External(String),
}

impl TaggerSpec {
    pub fn build(&self) -> Box<dyn Tagger> {
        match self {
            TaggerSpec::Reference => Box::new(ReferenceSpectralTagger::default()),
            TaggerSpec::Sleep(d) => Box::new(stub::SleepTagger::new(*d)),
            TaggerSpec::Work(passes) => Box::new(stub::WorkTagger::new(*passes)),
            TaggerSpec::External(cmd) => Box::new(ExternalTagger::new(cmd.clone())),
        }
    }
}


impl FromStr for TaggerSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s == "reference" {
            return Ok(TaggerSpec::Reference);
        }
        let (kind, arg) = s.split_once(':').ok_or_else(|| format!("unknown tagger {s:?}"))?;
        match kind {
            "sleep" => arg
                .parse::<u64>()
                .map(|ms| TaggerSpec::Sleep(Duration::from_millis(ms)))
                .map_err(|e| format!("bad sleep milliseconds {arg:?}: {e}")),
            "work" => match arg.parse::<u32>() {
                Ok(p) if p > 0 => Ok(TaggerSpec::Work(p)),
                _ => Err(format!("bad work passes {arg:?}")),
            },
            "external" if !arg.trim().is_empty() => Ok(TaggerSpec::External(arg.to_string())),
            _ => Err(format!("unknown tagger {s:?}")),
        }
    }
}

impl fmt::Display for TaggerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaggerSpec::Reference => f.write_str("reference"),
            TaggerSpec::Sleep(d) => write!(f, "sleep:{}", d.as_millis()),
            TaggerSpec::Work(p) => write!(f, "work:{p}"),
            TaggerSpec::External(c) => write!(f, "external:{c}"),
        }
    }
}
