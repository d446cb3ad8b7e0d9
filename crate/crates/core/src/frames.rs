//! Audio, video and metadata frames and their binary wire codec.
//!
//! Every frame on the wire is a 20-byte header followed by a kind-specific
//! payload. All multi-byte integers are little-endian.
//!
//! ```text
//! offset size field
//!      0    4 magic            "TSRM" (0x54 0x53 0x52 0x4D)
//!      4    1 version          1
//!      5    1 kind             0 = audio, 1 = video, 2 = metadata
//!      6    2 flags            reserved, 0
//!      8    8 timestamp_100ns  100 ns ticks since the Unix epoch
//!     16    4 payload_len      bytes following the header
//! ```
//!
//! Audio payload: `sample_rate_hz u32`, `channels u32`,
//! `samples_per_channel u32`, then planar `f32` samples.
//! Video payload: `width u32`, `height u32`, `fourcc [u8; 4]`, `data_len u32`,
//! then `data_len` opaque bytes.
//! Metadata payload: the UTF-8 XML document, unterminated.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"TSRM";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 20;
/// Upper bound on `payload_len` accepted from the wire.
pub const MAX_PAYLOAD_LEN: u32 = 64 * 1024 * 1024;

/// Current wall-clock time in 100 ns ticks since the Unix epoch.
pub fn now_100ns() -> u64 {
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| (d.as_nanos() / 100) as u64).unwrap_or(0)
}

const AUDIO_FIXED_LEN: usize = 12;
const VIDEO_FIXED_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    /// The buffer ends before the frame does. `needed` is the total length
    /// of the frame when known, otherwise the header length.
    #[error("need more data: have {have} bytes, need {needed}")]
    NeedMoreData { have: usize, needed: usize },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("decode error: {0}")]
    Decode(String),
    #[error("encoding error: {0}")]
    Encoding(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum FrameKind {
    Audio = 0,
    Video = 1,
    Metadata = 2,
}

impl FrameKind {
    pub const ALL: [FrameKind; 3] = [FrameKind::Audio, FrameKind::Video, FrameKind::Metadata];

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(FrameKind::Audio),
            1 => Some(FrameKind::Video),
            2 => Some(FrameKind::Metadata),
            _ => None,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FrameKind::Audio => "audio",
            FrameKind::Video => "video",
            FrameKind::Metadata => "metadata",
        }
    }
}

impl fmt::Display for FrameKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Parsed fixed-size frame header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameHeader {
    pub kind: FrameKind,
    pub timestamp_100ns: u64,
    pub payload_len: u32,
}

impl FrameHeader {
    /// Validates magic, version, kind, flags and the payload bound.
    pub fn parse(bytes: &[u8; HEADER_LEN]) -> Result<Self, CodecError> {
        if bytes[0..4] != MAGIC {
            return Err(CodecError::Protocol(format!("bad magic {:02x?}", &bytes[0..4])));
        }
        if bytes[4] != VERSION {
            return Err(CodecError::Protocol(format!("unsupported version {}", bytes[4])));
        }
        let kind = FrameKind::from_u8(bytes[5])
            .ok_or_else(|| CodecError::Protocol(format!("unknown frame kind {}", bytes[5])))?;
        let flags = u16::from_le_bytes([bytes[6], bytes[7]]);
        if flags != 0 {
            return Err(CodecError::Protocol(format!("reserved flags set: {flags:#06x}")));
        }
        let timestamp_100ns = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let payload_len = u32::from_le_bytes(bytes[16..20].try_into().unwrap());
        if payload_len > MAX_PAYLOAD_LEN {
            return Err(CodecError::Protocol(format!("payload_len {payload_len} exceeds limit {MAX_PAYLOAD_LEN}")));
        }
        Ok(FrameHeader { kind, timestamp_100ns, payload_len })
    }

    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[0..4].copy_from_slice(&MAGIC);
        out[4] = VERSION;
        out[5] = self.kind as u8;
        out[8..16].copy_from_slice(&self.timestamp_100ns.to_le_bytes());
        out[16..20].copy_from_slice(&self.payload_len.to_le_bytes());
        out
    }

    pub fn frame_len(&self) -> usize {
        HEADER_LEN + self.payload_len as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AudioFrame {
    pub timestamp_100ns: u64,
    pub sample_rate_hz: u32,
    pub channels: u32,
    pub samples_per_channel: u32,
    /// Planar: all of channel 0, then channel 1, ...
    pub samples: Vec<f32>,
}

impl AudioFrame {
    pub fn mono(timestamp_100ns: u64, sample_rate_hz: u32, samples: Vec<f32>) -> Self {
        AudioFrame { timestamp_100ns, sample_rate_hz, channels: 1, samples_per_channel: samples.len() as u32, samples }
    }

    pub fn channel(&self, ch: usize) -> &[f32] {
        let n = self.samples_per_channel as usize;
        &self.samples[ch * n..(ch + 1) * n]
    }

    fn check(&self) -> Result<(), String> {
        if self.channels == 0 {
            return Err("audio frame has zero channels".into());
        }
        if self.samples_per_channel == 0 {
            return Err("audio frame has zero samples per channel".into());
        }
        let expected = self.channels as u64 * self.samples_per_channel as u64;
        if self.samples.len() as u64 != expected {
            return Err(format!("audio frame carries {} samples, header implies {expected}", self.samples.len()));
        }
        if let Some(i) = self.samples.iter().position(|s| !s.is_finite()) {
            return Err(format!("non-finite audio sample at index {i}"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VideoFrame {
    pub timestamp_100ns: u64,
    pub width: u32,
    pub height: u32,
    pub fourcc: [u8; 4],
    pub data: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetadataFrame {
    pub timestamp_100ns: u64,
    pub xml: String,
}

impl MetadataFrame {
    pub fn new(timestamp_100ns: u64, xml: impl Into<String>) -> Self {
        MetadataFrame { timestamp_100ns, xml: xml.into() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Frame {
    Audio(AudioFrame),
    Video(VideoFrame),
    Metadata(MetadataFrame),
}

impl Frame {
    pub fn kind(&self) -> FrameKind {
        match self {
            Frame::Audio(_) => FrameKind::Audio,
            Frame::Video(_) => FrameKind::Video,
            Frame::Metadata(_) => FrameKind::Metadata,
        }
    }

    pub fn timestamp_100ns(&self) -> u64 {
        match self {
            Frame::Audio(f) => f.timestamp_100ns,
            Frame::Video(f) => f.timestamp_100ns,
            Frame::Metadata(f) => f.timestamp_100ns,
        }
    }
}

impl From<AudioFrame> for Frame {
    fn from(f: AudioFrame) -> Self {
        Frame::Audio(f)
    }
}

impl From<VideoFrame> for Frame {
    fn from(f: VideoFrame) -> Self {
        Frame::Video(f)
    }
}

impl From<MetadataFrame> for Frame {
    fn from(f: MetadataFrame) -> Self {
        Frame::Metadata(f)
    }
}

/// The wire bytes of one valid frame.
///
/// Only [`encode_frame`] and [`decode_frame`] produce these, so holding one
/// means the bytes passed validation. Cloning shares the buffer.
#[derive(Clone, PartialEq, Eq)]
pub struct EncodedFrame {
    kind: FrameKind,
    bytes: Arc<[u8]>,
}

impl EncodedFrame {
    pub fn kind(&self) -> FrameKind {
        self.kind
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn shared_bytes(&self) -> Arc<[u8]> {
        Arc::clone(&self.bytes)
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    /// For readers that parsed the header and decoded the payload themselves.
    pub(crate) fn from_validated(kind: FrameKind, bytes: Vec<u8>) -> Self {
        EncodedFrame { kind, bytes: bytes.into() }
    }
}

impl fmt::Debug for EncodedFrame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EncodedFrame").field("kind", &self.kind).field("len", &self.bytes.len()).finish()
    }
}

/// Encodes `frame` into its wire form.
pub fn encode_frame(frame: &Frame) -> Result<EncodedFrame, CodecError> {
    let payload_len = payload_len(frame)?;
    let mut out = Vec::with_capacity(HEADER_LEN + payload_len);
    let header =
        FrameHeader { kind: frame.kind(), timestamp_100ns: frame.timestamp_100ns(), payload_len: payload_len as u32 };
    out.extend_from_slice(&header.to_bytes());
    match frame {
        Frame::Audio(a) => {
            out.extend_from_slice(&a.sample_rate_hz.to_le_bytes());
            out.extend_from_slice(&a.channels.to_le_bytes());
            out.extend_from_slice(&a.samples_per_channel.to_le_bytes());
            for s in &a.samples {
                out.extend_from_slice(&s.to_le_bytes());
            }
        }
        Frame::Video(v) => {
            out.extend_from_slice(&v.width.to_le_bytes());
            out.extend_from_slice(&v.height.to_le_bytes());
            out.extend_from_slice(&v.fourcc);
            out.extend_from_slice(&(v.data.len() as u32).to_le_bytes());
            out.extend_from_slice(&v.data);
        }
        Frame::Metadata(m) => out.extend_from_slice(m.xml.as_bytes()),
    }
    debug_assert_eq!(out.len(), HEADER_LEN + payload_len);
    Ok(EncodedFrame { kind: frame.kind(), bytes: out.into() })
}

fn payload_len(frame: &Frame) -> Result<usize, CodecError> {
    let len = match frame {
        Frame::Audio(a) => {
            a.check().map_err(CodecError::Encoding)?;
            AUDIO_FIXED_LEN + 4 * a.samples.len()
        }
        Frame::Video(v) => VIDEO_FIXED_LEN + v.data.len(),
        Frame::Metadata(m) => {
            check_xml(&m.xml).map_err(CodecError::Encoding)?;
            m.xml.len()
        }
    };
    if len > MAX_PAYLOAD_LEN as usize {
        return Err(CodecError::Encoding(format!("payload of {len} bytes exceeds limit {MAX_PAYLOAD_LEN}")));
    }
    Ok(len)
}

/// Decodes one frame from the front of `bytes`.
///
/// Returns the frame, its encoded form and the number of bytes consumed.
/// Trailing bytes beyond the first frame are left untouched.
pub fn decode_frame(bytes: &[u8]) -> Result<(Frame, EncodedFrame, usize), CodecError> {
    let prefix = bytes.len().min(MAGIC.len());
    if bytes[..prefix] != MAGIC[..prefix] {
        return Err(CodecError::Protocol(format!("bad magic {:02x?}", &bytes[..prefix])));
    }
    if bytes.len() < HEADER_LEN {
        // Reject a bad version as soon as it is visible.
        if bytes.len() > 4 && bytes[4] != VERSION {
            return Err(CodecError::Protocol(format!("unsupported version {}", bytes[4])));
        }
        return Err(CodecError::NeedMoreData { have: bytes.len(), needed: HEADER_LEN });
    }
    let header = FrameHeader::parse(bytes[..HEADER_LEN].try_into().unwrap())?;
    let total = header.frame_len();
    if bytes.len() < total {
        return Err(CodecError::NeedMoreData { have: bytes.len(), needed: total });
    }
    let frame = decode_payload(&header, &bytes[HEADER_LEN..total])?;
    let encoded = EncodedFrame { kind: header.kind, bytes: bytes[..total].into() };
    Ok((frame, encoded, total))
}

/// Decodes a payload whose header has already been parsed.
pub fn decode_payload(header: &FrameHeader, payload: &[u8]) -> Result<Frame, CodecError> {
    if payload.len() != header.payload_len as usize {
        return Err(CodecError::Decode(format!(
            "payload is {} bytes, header declares {}",
            payload.len(),
            header.payload_len
        )));
    }
    let ts = header.timestamp_100ns;
    match header.kind {
        FrameKind::Audio => {
            if payload.len() < AUDIO_FIXED_LEN {
                return Err(CodecError::Decode("audio payload shorter than its fixed fields".into()));
            }
            let sample_rate_hz = read_u32(payload, 0);
            let channels = read_u32(payload, 4);
            let samples_per_channel = read_u32(payload, 8);
            let body = &payload[AUDIO_FIXED_LEN..];
            let declared = channels as u64 * samples_per_channel as u64 * 4;
            if body.len() as u64 != declared {
                return Err(CodecError::Decode(format!(
                    "audio body is {} bytes, {channels} x {samples_per_channel} samples need {declared}",
                    body.len()
                )));
            }
            let samples: Vec<f32> = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            let frame = AudioFrame { timestamp_100ns: ts, sample_rate_hz, channels, samples_per_channel, samples };
            frame.check().map_err(CodecError::Decode)?;
            Ok(Frame::Audio(frame))
        }
        FrameKind::Video => {
            if payload.len() < VIDEO_FIXED_LEN {
                return Err(CodecError::Decode("video payload shorter than its fixed fields".into()));
            }
            let width = read_u32(payload, 0);
            let height = read_u32(payload, 4);
            let fourcc: [u8; 4] = payload[8..12].try_into().unwrap();
            let data_len = read_u32(payload, 12) as usize;
            let data = &payload[VIDEO_FIXED_LEN..];
            if data.len() != data_len {
                return Err(CodecError::Decode(format!("video data is {} bytes, declared {data_len}", data.len())));
            }
            Ok(Frame::Video(VideoFrame { timestamp_100ns: ts, width, height, fourcc, data: data.to_vec() }))
        }
        FrameKind::Metadata => {
            let xml =
                std::str::from_utf8(payload).map_err(|e| CodecError::Decode(format!("metadata is not UTF-8: {e}")))?;
            check_xml(xml).map_err(CodecError::Decode)?;
            Ok(Frame::Metadata(MetadataFrame { timestamp_100ns: ts, xml: xml.to_owned() }))
        }
    }
}

fn read_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

/// Checks that `xml` is a single well-formed element with no interior NUL.
///
/// An XML declaration, comments, processing instructions and whitespace
/// are allowed around the root element.
pub fn check_xml(xml: &str) -> Result<(), String> {
    use quick_xml::events::Event;

    if xml.contains('\0') {
        return Err("metadata XML contains NUL".into());
    }
    let mut reader = quick_xml::Reader::from_str(xml);
    reader.config_mut().check_end_names = true;
    let mut depth = 0usize;
    let mut roots = 0usize;
    loop {
        match reader.read_event() {
            Ok(Event::Start(_)) => {
                if depth == 0 {
                    roots += 1;
                }
                depth += 1;
            }
            Ok(Event::End(_)) => depth -= 1,
            Ok(Event::Empty(e)) => {
                if depth == 0 {
                    roots += 1;
                }
                for attr in e.attributes() {
                    attr.map_err(|err| format!("bad attribute: {err}"))?;
                }
            }
            Ok(Event::Text(t)) => {
                if depth == 0 && !t.iter().all(u8::is_ascii_whitespace) {
                    return Err("text outside the root element".into());
                }
                t.unescape().map_err(|err| format!("bad text: {err}"))?;
            }
            Ok(Event::CData(_)) if depth == 0 => return Err("CDATA outside the root element".into()),
            Ok(Event::DocType(_)) => return Err("DOCTYPE not allowed in metadata".into()),
            Ok(Event::Eof) => break,
            Ok(_) => {}
            Err(e) => return Err(format!("malformed XML: {e}")),
        }
        if roots > 1 {
            return Err("more than one root element".into());
        }
    }
    if depth != 0 {
        return Err("unclosed element".into());
    }
    if roots != 1 {
        return Err("no root element".into());
    }
    Ok(())
}
