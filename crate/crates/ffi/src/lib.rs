//! C ABI for tagstream.
//!
//! Every object is an opaque handle created by a `tsrm_*_new`/`connect`
//! call and released with the matching `tsrm_*_free`. Functions return a
//! [`TsrmStatus`]; on failure [`tsrm_last_error`] describes the problem.
//! Borrowed pointers handed out by a handle stay valid until that handle
//! is freed or next mutated.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::net::{SocketAddr, ToSocketAddrs};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;
use std::time::Duration;

use tagstream::discovery::{DiscoveryConfig, Finder, DEFAULT_GROUP};
use tagstream::frames::{self, AudioFrame, CodecError, Frame, MetadataFrame, VideoFrame};
use tagstream::tagging::xml::{build_metadata_xml, parse_metadata_xml, XmlError};
use tagstream::tagging::{TagResult, TaggerSpec, TaggingStage};
use tagstream::transport::{self, KindMask, ReceiverConfig, ReceiverSession, Recv, Sender, SenderConfig};
use tagstream::windowing::{SampleWindow, WindowConfig, Windower};

/// Result of every fallible call. Negative values are errors.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TsrmStatus {
    Ok = 0,
    /// Not an error: nothing available yet (no window, no frame before the timeout).
    NotReady = 1,
    NullPointer = -1,
    InvalidArgument = -2,
    /// The buffer holds only part of a frame.
    NeedMoreData = -3,
    Codec = -4,
    Io = -5,
    EndOfStream = -6,
    Tagger = -7,
    Xml = -8,
    /// The output buffer is too small; the required size was reported.
    BufferTooSmall = -9,
    NotFound = -10,
    Panic = -99,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TsrmFrameKind {
    Audio = 0,
    Video = 1,
    Metadata = 2,
}

/// A decoded frame.
pub struct TsrmFrame {
    frame: Frame,
    xml: Option<CString>,
}

/// Accumulates audio frames into fixed-length windows.
pub struct TsrmWindower {
    inner: Windower,
}

/// One analysis window of mono samples.
pub struct TsrmWindow {
    inner: SampleWindow,
}

/// A tagger plus its ranking and truncation settings.
pub struct TsrmTagger {
    stage: TaggingStage,
}

/// Ranked predictions for one window, or parsed from tag metadata.
pub struct TsrmTagResult {
    result: TagResult,
    source: CString,
    labels: Vec<CString>,
}

pub struct TsrmSender {
    inner: Sender,
}

pub struct TsrmReceiver {
    inner: ReceiverSession,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn fail(status: TsrmStatus, msg: impl Into<String>) -> TsrmStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> TsrmStatus) -> TsrmStatus {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| fail(TsrmStatus::Panic, "internal panic"))
}

fn codec_status(e: &CodecError) -> TsrmStatus {
    match e {
        CodecError::NeedMoreData { .. } => TsrmStatus::NeedMoreData,
        _ => TsrmStatus::Codec,
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, TsrmStatus> {
    if p.is_null() {
        return Err(fail(TsrmStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(TsrmStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], TsrmStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(TsrmStatus::NullPointer, format!("{what} is null")));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, TsrmStatus> {
    p.as_ref().ok_or_else(|| fail(TsrmStatus::NullPointer, format!("{what} is null")))
}

unsafe fn handle_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, TsrmStatus> {
    p.as_mut().ok_or_else(|| fail(TsrmStatus::NullPointer, format!("{what} is null")))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> TsrmStatus {
    *out = Box::into_raw(Box::new(value));
    TsrmStatus::Ok
}

macro_rules! tri {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(s) => return s,
        }
    };
}

macro_rules! out_arg {
    ($out:expr) => {
        if $out.is_null() {
            return fail(TsrmStatus::NullPointer, "output pointer is null");
        }
    };
}

/// Message for the last failed call on this thread. Never null; empty if
/// nothing has failed. Valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn tsrm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn tsrm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

fn wrap_frame(frame: Frame) -> TsrmFrame {
    let xml = match &frame {
        Frame::Metadata(m) => Some(CString::new(m.xml.clone()).unwrap_or_default()),
        _ => None,
    };
    TsrmFrame { frame, xml }
}

/// Builds an audio frame from planar samples (`channels * samples_per_channel` floats).
///
/// # Safety
/// `samples` must point to that many floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tsrm_frame_new_audio(
    timestamp_100ns: u64,
    sample_rate_hz: u32,
    channels: u32,
    samples_per_channel: u32,
    samples: *const f32,
    out: *mut *mut TsrmFrame,
) -> TsrmStatus {
    guard(|| {
        out_arg!(out);
        let n = channels as usize * samples_per_channel as usize;
        let data = tri!(slice_arg(samples, n, "samples"));
        let frame = Frame::Audio(AudioFrame {
            timestamp_100ns,
            sample_rate_hz,
            channels,
            samples_per_channel,
            samples: data.to_vec(),
        });
        if let Err(e) = frames::encode_frame(&frame) {
            return fail(TsrmStatus::InvalidArgument, e.to_string());
        }
        put(out, wrap_frame(frame))
    })
}

/// Builds a video frame. `fourcc` points to 4 bytes.
///
/// # Safety
/// `fourcc` must point to 4 bytes and `data` to `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn tsrm_frame_new_video(
    timestamp_100ns: u64,
    width: u32,
    height: u32,
    fourcc: *const u8,
    data: *const u8,
    len: usize,
    out: *mut *mut TsrmFrame,
) -> TsrmStatus {
    guard(|| {
        out_arg!(out);
        let cc = tri!(slice_arg(fourcc, 4, "fourcc"));
        let bytes = tri!(slice_arg(data, len, "data"));
        let frame = Frame::Video(VideoFrame {
            timestamp_100ns,
            width,
            height,
            fourcc: [cc[0], cc[1], cc[2], cc[3]],
            data: bytes.to_vec(),
        });
        if let Err(e) = frames::encode_frame(&frame) {
            return fail(TsrmStatus::InvalidArgument, e.to_string());
        }
        put(out, wrap_frame(frame))
    })
}

/// Builds a metadata frame from a single-root XML document.
///
/// # Safety
/// `xml` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn tsrm_frame_new_metadata(
    timestamp_100ns: u64,
    xml: *const c_char,
    out: *mut *mut TsrmFrame,
) -> TsrmStatus {
    guard(|| {
        out_arg!(out);
        let text = tri!(str_arg(xml, "xml"));
        if let Err(e) = frames::check_xml(text) {
            return fail(TsrmStatus::InvalidArgument, e);
        }
        put(out, wrap_frame(Frame::Metadata(MetadataFrame::new(timestamp_100ns, text))))
    })
}

/// # Safety
/// `frame` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn tsrm_frame_free(frame: *mut TsrmFrame) {
    if !frame.is_null() {
        drop(Box::from_raw(frame));
    }
}

/// # Safety
/// `frame` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn tsrm_frame_kind(frame: *const TsrmFrame) -> TsrmFrameKind {
    match frame.as_ref().map(|f| &f.frame) {
        Some(Frame::Video(_)) => TsrmFrameKind::Video,
        Some(Frame::Metadata(_)) => TsrmFrameKind::Metadata,
        _ => TsrmFrameKind::Audio,
    }
}

/// # Safety
/// `frame` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn tsrm_frame_timestamp(frame: *const TsrmFrame) -> u64 {
    frame.as_ref().map_or(0, |f| f.frame.timestamp_100ns())
}

/// Audio parameters and a borrowed pointer to the planar samples.
/// Any output pointer may be null.
///
/// # Safety
/// `frame` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn tsrm_frame_audio(
    frame: *const TsrmFrame,
    sample_rate_hz: *mut u32,
    channels: *mut u32,
    samples_per_channel: *mut u32,
    samples: *mut *const f32,
) -> TsrmStatus {
    guard(|| {
        let f = tri!(handle(frame, "frame"));
        let Frame::Audio(a) = &f.frame else {
            return fail(TsrmStatus::InvalidArgument, "not an audio frame");
        };
        if let Some(p) = sample_rate_hz.as_mut() {
            *p = a.sample_rate_hz;
        }
        if let Some(p) = channels.as_mut() {
            *p = a.channels;
        }
        if let Some(p) = samples_per_channel.as_mut() {
            *p = a.samples_per_channel;
        }
        if let Some(p) = samples.as_mut() {
            *p = a.samples.as_ptr();
        }
        TsrmStatus::Ok
    })
}

/// Video parameters and a borrowed pointer to the pixel bytes.
/// Any output pointer may be null; `fourcc` receives 4 bytes.
///
/// # Safety
/// `frame` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn tsrm_frame_video(
    frame: *const TsrmFrame,
    width: *mut u32,
    height: *mut u32,
    fourcc: *mut u8,
    data: *mut *const u8,
    len: *mut usize,
) -> TsrmStatus {
    guard(|| {
        let f = tri!(handle(frame, "frame"));
        let Frame::Video(v) = &f.frame else {
            return fail(TsrmStatus::InvalidArgument, "not a video frame");
        };
        if let Some(p) = width.as_mut() {
            *p = v.width;
        }
        if let Some(p) = height.as_mut() {
            *p = v.height;
        }
        if !fourcc.is_null() {
            ptr::copy_nonoverlapping(v.fourcc.as_ptr(), fourcc, 4);
        }
        if let Some(p) = data.as_mut() {
            *p = v.data.as_ptr();
        }
        if let Some(p) = len.as_mut() {
            *p = v.data.len();
        }
        TsrmStatus::Ok
    })
}

/// Borrowed XML text of a metadata frame, or null for other kinds.
///
/// # Safety
/// `frame` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn tsrm_frame_metadata_xml(frame: *const TsrmFrame) -> *const c_char {
    frame.as_ref().and_then(|f| f.xml.as_ref()).map_or(ptr::null(), |x| x.as_ptr())
}

/// Writes the wire encoding of `frame` into `buf`. `written` receives the
/// encoded length; on `BufferTooSmall` it receives the size needed.
///
/// # Safety
/// `buf` must have room for `cap` bytes; `written` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tsrm_encode(
    frame: *const TsrmFrame,
    buf: *mut u8,
    cap: usize,
    written: *mut usize,
) -> TsrmStatus {
    guard(|| {
        out_arg!(written);
        let f = tri!(handle(frame, "frame"));
        let enc = match frames::encode_frame(&f.frame) {
            Ok(e) => e,
            Err(e) => return fail(codec_status(&e), e.to_string()),
        };
        *written = enc.len();
        if enc.len() > cap {
            return fail(TsrmStatus::BufferTooSmall, format!("need {} bytes, have {cap}", enc.len()));
        }
        if buf.is_null() {
            return fail(TsrmStatus::NullPointer, "buf is null");
        }
        ptr::copy_nonoverlapping(enc.as_bytes().as_ptr(), buf, enc.len());
        TsrmStatus::Ok
    })
}

/// Decodes the first frame in `bytes`. `consumed` receives its encoded
/// length; on `NeedMoreData` it receives the total length needed when known.
///
/// # Safety
/// `bytes` must point to `len` bytes; output pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn tsrm_decode(
    bytes: *const u8,
    len: usize,
    out: *mut *mut TsrmFrame,
    consumed: *mut usize,
) -> TsrmStatus {
    guard(|| {
        out_arg!(out);
        out_arg!(consumed);
        let data = tri!(slice_arg(bytes, len, "bytes"));
        match frames::decode_frame(data) {
            Ok((frame, _, used)) => {
                *consumed = used;
                put(out, wrap_frame(frame))
            }
            Err(e) => {
                *consumed = match e {
                    CodecError::NeedMoreData { needed, .. } => needed,
                    _ => 0,
                };
                fail(codec_status(&e), e.to_string())
            }
        }
    })
}

/// A windower with the given window and hop (0 means tumbling) at 48 kHz.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tsrm_windower_new(
    window_samples: usize,
    hop_samples: usize,
    out: *mut *mut TsrmWindower,
) -> TsrmStatus {
    guard(|| {
        out_arg!(out);
        let hop = if hop_samples == 0 { window_samples } else { hop_samples };
        let cfg = WindowConfig { window_samples, hop_samples: hop, ..WindowConfig::default() };
        match Windower::new(cfg) {
            Ok(w) => put(out, TsrmWindower { inner: w }),
            Err(e) => fail(TsrmStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// # Safety
/// `w` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn tsrm_windower_free(w: *mut TsrmWindower) {
    if !w.is_null() {
        drop(Box::from_raw(w));
    }
}

/// Feeds one audio frame.
///
/// # Safety
/// Both handles must be valid.
#[no_mangle]
pub unsafe extern "C" fn tsrm_windower_push(w: *mut TsrmWindower, frame: *const TsrmFrame) -> TsrmStatus {
    guard(|| {
        let w = tri!(handle_mut(w, "windower"));
        let f = tri!(handle(frame, "frame"));
        let Frame::Audio(a) = &f.frame else {
            return fail(TsrmStatus::InvalidArgument, "not an audio frame");
        };
        match w.inner.push_frame(a) {
            Ok(()) => TsrmStatus::Ok,
            Err(e) => fail(TsrmStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Takes the next complete window, or returns `NotReady`.
///
/// # Safety
/// `w` must be valid and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tsrm_windower_take(w: *mut TsrmWindower, out: *mut *mut TsrmWindow) -> TsrmStatus {
    guard(|| {
        out_arg!(out);
        let w = tri!(handle_mut(w, "windower"));
        match w.inner.try_take_window() {
            Some(win) => put(out, TsrmWindow { inner: win }),
            None => TsrmStatus::NotReady,
        }
    })
}

/// # Safety
/// `win` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn tsrm_window_free(win: *mut TsrmWindow) {
    if !win.is_null() {
        drop(Box::from_raw(win));
    }
}

/// Borrowed samples of a window. Any output pointer may be null.
///
/// # Safety
/// `win` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn tsrm_window_samples(
    win: *const TsrmWindow,
    samples: *mut *const f32,
    len: *mut usize,
    start_timestamp_100ns: *mut u64,
    sample_rate_hz: *mut u32,
) -> TsrmStatus {
    guard(|| {
        let w = &tri!(handle(win, "window")).inner;
        if let Some(p) = samples.as_mut() {
            *p = w.samples.as_ptr();
        }
        if let Some(p) = len.as_mut() {
            *p = w.samples.len();
        }
        if let Some(p) = start_timestamp_100ns.as_mut() {
            *p = w.start_timestamp_100ns;
        }
        if let Some(p) = sample_rate_hz.as_mut() {
            *p = w.sample_rate_hz;
        }
        TsrmStatus::Ok
    })
}

/// A tagger from a spec string: `reference`, `sleep:<ms>`, `work:<passes>`
/// or `external:<command>`. `top_k` of 0 keeps every prediction.
///
/// # Safety
/// `spec` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tsrm_tagger_new(spec: *const c_char, top_k: usize, out: *mut *mut TsrmTagger) -> TsrmStatus {
    guard(|| {
        out_arg!(out);
        let text = tri!(str_arg(spec, "spec"));
        let spec: TaggerSpec = match text.parse() {
            Ok(s) => s,
            Err(e) => return fail(TsrmStatus::InvalidArgument, e),
        };
        let k = if top_k == 0 { usize::MAX } else { top_k };
        put(out, TsrmTagger { stage: TaggingStage::new(spec.build(), None, k) })
    })
}

/// # Safety
/// `t` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn tsrm_tagger_free(t: *mut TsrmTagger) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

fn wrap_result(result: TagResult, source: &str) -> TsrmTagResult {
    let labels =
        result.predictions.iter().map(|p| CString::new(p.label.replace('\0', " ")).unwrap_or_default()).collect();
    TsrmTagResult { result, source: CString::new(source.replace('\0', " ")).unwrap_or_default(), labels }
}

/// Tags `len` mono samples.
///
/// # Safety
/// `samples` must point to `len` floats and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn tsrm_tagger_tag(
    t: *mut TsrmTagger,
    samples: *const f32,
    len: usize,
    sample_rate_hz: u32,
    start_timestamp_100ns: u64,
    out: *mut *mut TsrmTagResult,
) -> TsrmStatus {
    guard(|| {
        out_arg!(out);
        let t = tri!(handle_mut(t, "tagger"));
        let data = tri!(slice_arg(samples, len, "samples"));
        let win = SampleWindow { samples: data.to_vec(), start_timestamp_100ns, sample_rate_hz };
        match t.stage.tag(&win) {
            Ok(r) => put(out, wrap_result(r, "")),
            Err(e) => fail(TsrmStatus::Tagger, e.to_string()),
        }
    })
}

/// # Safety
/// `r` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn tsrm_tag_result_free(r: *mut TsrmTagResult) {
    if !r.is_null() {
        drop(Box::from_raw(r));
    }
}

/// # Safety
/// `r` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn tsrm_tag_result_count(r: *const TsrmTagResult) -> usize {
    r.as_ref().map_or(0, |r| r.result.predictions.len())
}

/// Borrowed label of prediction `i`, or null when out of range.
///
/// # Safety
/// `r` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn tsrm_tag_result_label(r: *const TsrmTagResult, i: usize) -> *const c_char {
    r.as_ref().and_then(|r| r.labels.get(i)).map_or(ptr::null(), |l| l.as_ptr())
}

/// Score of prediction `i`, or -1 when out of range.
///
/// # Safety
/// `r` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn tsrm_tag_result_score(r: *const TsrmTagResult, i: usize) -> f64 {
    r.as_ref().and_then(|r| r.result.predictions.get(i)).map_or(-1.0, |p| p.score)
}

/// Tagger time for the window in milliseconds.
///
/// # Safety
/// `r` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn tsrm_tag_result_inference_ms(r: *const TsrmTagResult) -> f64 {
    r.as_ref().map_or(0.0, |r| r.result.inference_ms)
}

/// Source name carried by parsed tag metadata; empty for local results.
///
/// # Safety
/// `r` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn tsrm_tag_result_source(r: *const TsrmTagResult) -> *const c_char {
    r.as_ref().map_or(ptr::null(), |r| r.source.as_ptr())
}

/// Renders a result as a tag metadata frame.
///
/// # Safety
/// `r` must be valid, `source_name` NUL-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tsrm_tag_result_to_frame(
    r: *const TsrmTagResult,
    source_name: *const c_char,
    out: *mut *mut TsrmFrame,
) -> TsrmStatus {
    guard(|| {
        out_arg!(out);
        let r = tri!(handle(r, "result"));
        let src = tri!(str_arg(source_name, "source_name"));
        put(out, wrap_frame(Frame::Metadata(build_metadata_xml(&r.result, src))))
    })
}

/// Parses tag metadata. Metadata with another root gives `NotFound`.
///
/// # Safety
/// `frame` must be valid and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tsrm_tag_result_parse(frame: *const TsrmFrame, out: *mut *mut TsrmTagResult) -> TsrmStatus {
    guard(|| {
        out_arg!(out);
        let f = tri!(handle(frame, "frame"));
        let Frame::Metadata(m) = &f.frame else {
            return fail(TsrmStatus::InvalidArgument, "not a metadata frame");
        };
        match parse_metadata_xml(m) {
            Ok(p) => put(out, wrap_result(p.result, &p.source_name)),
            Err(e @ XmlError::NotTagMetadata(_)) => fail(TsrmStatus::NotFound, e.to_string()),
            Err(e) => fail(TsrmStatus::Xml, e.to_string()),
        }
    })
}

/// Opens a sender on `port` (0 for any). A null `group` means the default
/// group. When `announce` is non-zero the source is announced on the
/// discovery port from `TSRM_DISCOVERY_PORT` or the default.
///
/// # Safety
/// `name` must be NUL-terminated, `group` NUL-terminated or null, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tsrm_sender_new(
    name: *const c_char,
    group: *const c_char,
    port: u16,
    announce: i32,
    out: *mut *mut TsrmSender,
) -> TsrmStatus {
    guard(|| {
        out_arg!(out);
        let name = tri!(str_arg(name, "name"));
        let group = if group.is_null() { DEFAULT_GROUP } else { tri!(str_arg(group, "group")) };
        let mut cfg = SenderConfig::new(name).group(group).port(port);
        if announce != 0 {
            match DiscoveryConfig::from_env() {
                Ok(d) => cfg = cfg.announce(d),
                Err(e) => return fail(TsrmStatus::InvalidArgument, e.to_string()),
            }
        }
        match transport::create_sender(cfg) {
            Ok(s) => put(out, TsrmSender { inner: s }),
            Err(e) => fail(TsrmStatus::Io, e.to_string()),
        }
    })
}

/// Flushes and closes the sender.
///
/// # Safety
/// `s` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn tsrm_sender_free(s: *mut TsrmSender) {
    if !s.is_null() {
        Box::from_raw(s).inner.close();
    }
}

/// # Safety
/// `s` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn tsrm_sender_port(s: *const TsrmSender) -> u16 {
    s.as_ref().map_or(0, |s| s.inner.port())
}

/// # Safety
/// `s` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn tsrm_sender_subscribers(s: *const TsrmSender) -> usize {
    s.as_ref().map_or(0, |s| s.inner.subscriber_count())
}

/// Waits up to `timeout_ms` for `n` subscribers; `NotReady` on timeout.
///
/// # Safety
/// `s` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn tsrm_sender_wait_for_subscribers(
    s: *const TsrmSender,
    n: usize,
    timeout_ms: u32,
) -> TsrmStatus {
    guard(|| {
        let s = tri!(handle(s, "sender"));
        if s.inner.wait_for_subscribers(n, Duration::from_millis(timeout_ms.into())) {
            TsrmStatus::Ok
        } else {
            TsrmStatus::NotReady
        }
    })
}

/// Queues `frame` for every subscriber. Never blocks on the network.
///
/// # Safety
/// Both handles must be valid.
#[no_mangle]
pub unsafe extern "C" fn tsrm_sender_send(s: *const TsrmSender, frame: *const TsrmFrame) -> TsrmStatus {
    guard(|| {
        let s = tri!(handle(s, "sender"));
        let f = tri!(handle(frame, "frame"));
        match s.inner.send_frame(&f.frame) {
            Ok(()) => TsrmStatus::Ok,
            Err(e) => fail(codec_status(&e), e.to_string()),
        }
    })
}

fn kinds(mask: u8) -> Result<KindMask, TsrmStatus> {
    match KindMask::from_bits(mask) {
        Some(k) if k != KindMask::NONE => Ok(k),
        _ => Err(fail(TsrmStatus::InvalidArgument, format!("bad kind mask {mask:#x}"))),
    }
}

/// Connects to `host:port`. `kinds` is a bitmask of 1 << kind; 0 is invalid.
///
/// # Safety
/// `addr` must be NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tsrm_receiver_connect(
    addr: *const c_char,
    kinds_mask: u8,
    out: *mut *mut TsrmReceiver,
) -> TsrmStatus {
    guard(|| {
        out_arg!(out);
        let text = tri!(str_arg(addr, "addr"));
        let kinds = tri!(kinds(kinds_mask));
        let Some(sock) = text.to_socket_addrs().ok().and_then(|mut a| a.next()) else {
            return fail(TsrmStatus::InvalidArgument, format!("bad address {text:?}"));
        };
        connect(sock, kinds, out)
    })
}

unsafe fn connect(addr: SocketAddr, kinds: KindMask, out: *mut *mut TsrmReceiver) -> TsrmStatus {
    match transport::connect_addr(&ReceiverConfig::default().kinds(kinds), addr) {
        Ok(s) => put(out, TsrmReceiver { inner: s }),
        Err(e) => fail(TsrmStatus::Io, e.to_string()),
    }
}

/// Finds `group/name` through discovery within `timeout_ms` and connects.
/// A null `group` means the default group.
///
/// # Safety
/// Strings must be NUL-terminated (or null for `group`); `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tsrm_receiver_connect_named(
    group: *const c_char,
    name: *const c_char,
    kinds_mask: u8,
    timeout_ms: u32,
    out: *mut *mut TsrmReceiver,
) -> TsrmStatus {
    guard(|| {
        out_arg!(out);
        let name = tri!(str_arg(name, "name"));
        let group = if group.is_null() { DEFAULT_GROUP } else { tri!(str_arg(group, "group")) };
        let kinds = tri!(kinds(kinds_mask));
        let cfg = match DiscoveryConfig::from_env() {
            Ok(c) => c,
            Err(e) => return fail(TsrmStatus::InvalidArgument, e.to_string()),
        };
        let finder = match Finder::bind(&cfg) {
            Ok(f) => f,
            Err(e) => return fail(TsrmStatus::Io, e.to_string()),
        };
        let timeout = Duration::from_millis(timeout_ms.into());
        if finder.wait_for(timeout, |s| s.iter().any(|a| a.group == group && a.name == name)).is_none() {
            return fail(TsrmStatus::NotFound, format!("{group}/{name} not found"));
        }
        match finder.lookup(group, name) {
            Some(ad) => connect(ad.endpoint(), kinds, out),
            None => fail(TsrmStatus::NotFound, format!("{group}/{name} expired")),
        }
    })
}

/// # Safety
/// `r` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn tsrm_receiver_free(r: *mut TsrmReceiver) {
    if !r.is_null() {
        Box::from_raw(r).inner.close();
    }
}

/// Waits up to `timeout_ms` for the next frame of a subscribed kind.
/// Returns `NotReady` on timeout and `EndOfStream` once the source is gone.
///
/// # Safety
/// `r` must be valid and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tsrm_receiver_recv(
    r: *mut TsrmReceiver,
    timeout_ms: u32,
    out: *mut *mut TsrmFrame,
) -> TsrmStatus {
    guard(|| {
        out_arg!(out);
        let r = tri!(handle_mut(r, "receiver"));
        match r.inner.recv_frame(Duration::from_millis(timeout_ms.into())) {
            Recv::Frame(f) => put(out, wrap_frame(f)),
            Recv::Timeout => TsrmStatus::NotReady,
            Recv::EndOfStream => {
                fail(TsrmStatus::EndOfStream, r.inner.end_reason().unwrap_or("end of stream").to_string())
            }
        }
    })
}
