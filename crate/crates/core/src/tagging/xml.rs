//! The `audio_tags` metadata schema.
//!
//! ```xml
//! <audio_tags src="cam1" ts="0" window_samples="48128" sample_rate="48000" inference_ms="12.5">
//!   <tag label="Silence" score="1.0000"/>
//! </audio_tags>
//! ```
//!
//! Built documents carry no whitespace between elements. `ts` is the start
//! of the analysed window; the enclosing frame is stamped at the window end.

use quick_xml::events::{BytesStart, Event};
use thiserror::Error;

use super::{TagPrediction, TagResult};
use crate::frames::{check_xml, MetadataFrame};
use crate::windowing::samples_to_ticks;

pub const ROOT: &str = "audio_tags";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum XmlError {
    /// Well-formed metadata with a different root; callers skip it.
    #[error("not tag metadata (root <{0}>)")]
    NotTagMetadata(String),
    #[error("malformed tag metadata: {0}")]
    ParseError(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedTags {
    pub source_name: String,
    pub result: TagResult,
}

/// Escapes text for use inside a double-quoted attribute.
pub fn escape_attr(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            '\t' => out.push_str("&#9;"),
            '\n' => out.push_str("&#10;"),
            '\r' => out.push_str("&#13;"),
            c => out.push(c),
        }
    }
    out
}

fn format_ms(ms: f64) -> String {
    let rounded = (ms * 1000.0).round() / 1000.0;
    if rounded == 0.0 {
        "0".into()
    } else {
        format!("{rounded}")
    }
}

pub fn build_metadata_xml(result: &TagResult, source_name: &str) -> MetadataFrame {
    let mut xml = format!(
        "<{ROOT} src=\"{}\" ts=\"{}\" window_samples=\"{}\" sample_rate=\"{}\" inference_ms=\"{}\">",
        escape_attr(source_name),
        result.window_start_timestamp_100ns,
        result.window_samples,
        result.sample_rate_hz,
        format_ms(result.inference_ms),
    );
    for p in &result.predictions {
        xml.push_str(&format!("<tag label=\"{}\" score=\"{:.4}\"/>", escape_attr(&p.label), p.score));
    }
    xml.push_str(&format!("</{ROOT}>"));
    let ts = result
        .window_start_timestamp_100ns
        .saturating_add(samples_to_ticks(result.window_samples as u64, result.sample_rate_hz));
    MetadataFrame { timestamp_100ns: ts, xml }
}

pub fn parse_metadata_xml(frame: &MetadataFrame) -> Result<ParsedTags, XmlError> {
    parse_tags_str(&frame.xml)
}

pub fn parse_tags_str(xml: &str) -> Result<ParsedTags, XmlError> {
    check_xml(xml).map_err(XmlError::ParseError)?;
    let mut reader = quick_xml::Reader::from_str(xml);
    let mut source_name = None;
    let mut result = None;
    let mut predictions = Vec::new();
    let mut depth = 0usize;
    loop {
        let event = reader.read_event().map_err(|e| XmlError::ParseError(e.to_string()))?;
        match event {
            Event::Start(ref e) | Event::Empty(ref e) => {
                let is_start = matches!(event, Event::Start(_));
                if depth == 0 {
                    let name = String::from_utf8_lossy(e.name().as_ref()).into_owned();
                    if name != ROOT {
                        return Err(XmlError::NotTagMetadata(name));
                    }
                    let (src, r) = parse_root(e)?;
                    source_name = Some(src);
                    result = Some(r);
                } else if depth == 1 && e.name().as_ref() == b"tag" {
                    predictions.push(parse_tag(e)?);
                }
                if is_start {
                    depth += 1;
                }
            }
            Event::End(_) => depth -= 1,
            Event::Eof => break,
            _ => {}
        }
    }
    match (source_name, result) {
        (Some(source_name), Some(mut result)) => {
            result.predictions = predictions;
            Ok(ParsedTags { source_name, result })
        }
        _ => Err(XmlError::ParseError("missing root element".into())),
    }
}

fn attrs(e: &BytesStart<'_>) -> Result<Vec<(String, String)>, XmlError> {
    e.attributes()
        .map(|a| {
            let a = a.map_err(|err| XmlError::ParseError(err.to_string()))?;
            let key = String::from_utf8_lossy(a.key.as_ref()).into_owned();
            let value = a.unescape_value().map_err(|err| XmlError::ParseError(err.to_string()))?;
            Ok((key, value.into_owned()))
        })
        .collect()
}

fn required<'a>(attrs: &'a [(String, String)], key: &str, elem: &str) -> Result<&'a str, XmlError> {
    attrs
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| XmlError::ParseError(format!("<{elem}> missing attribute {key}")))
}

fn number<T: std::str::FromStr>(attrs: &[(String, String)], key: &str, elem: &str) -> Result<T, XmlError> {
    let raw = required(attrs, key, elem)?;
    raw.parse().map_err(|_| XmlError::ParseError(format!("<{elem}> attribute {key}={raw:?} is not a valid number")))
}

fn parse_root(e: &BytesStart<'_>) -> Result<(String, TagResult), XmlError> {
    let a = attrs(e)?;
    let src = required(&a, "src", ROOT)?.to_string();
    let inference_ms: f64 = number(&a, "inference_ms", ROOT)?;
    if !inference_ms.is_finite() || inference_ms < 0.0 {
        return Err(XmlError::ParseError(format!("inference_ms {inference_ms} out of range")));
    }
    let result = TagResult {
        predictions: Vec::new(),
        window_start_timestamp_100ns: number(&a, "ts", ROOT)?,
        window_samples: number(&a, "window_samples", ROOT)?,
        sample_rate_hz: number(&a, "sample_rate", ROOT)?,
        inference_ms,
    };
    Ok((src, result))
}

fn parse_tag(e: &BytesStart<'_>) -> Result<TagPrediction, XmlError> {
    let a = attrs(e)?;
    let label = required(&a, "label", "tag")?.to_string();
    let score: f64 = number(&a, "score", "tag")?;
    if !(0.0..=1.0).contains(&score) {
        return Err(XmlError::ParseError(format!("score {score} outside [0, 1]")));
    }
    Ok(TagPrediction { label, score })
}
