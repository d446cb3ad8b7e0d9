//! Signal producers: synthetic generators, a WAV reader and a paced player.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::frames::{self, AudioFrame, CodecError, Frame};
use crate::transport::Sender;
use crate::windowing::samples_to_ticks;

pub const DEFAULT_FRAME_SAMPLES: usize = 1024;
const DEFAULT_AMPLITUDE: f32 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub enum Signal {
    Sine {
        freq_hz: f64,
        amplitude: f32,
    },
    /// Uniform on `[-amplitude, amplitude]`.
    WhiteNoise {
        amplitude: f32,
        seed: u64,
    },
    Silence,
    /// Sum of the parts, clamped to `[-1, 1]`.
    Mix(Vec<Signal>),
}

impl Signal {
    fn validate(&self) -> Result<(), String> {
        let amp_ok = |a: f32| (0.0..=1.0).contains(&a);
        match self {
            Signal::Sine { freq_hz, amplitude } => {
                if !freq_hz.is_finite() || *freq_hz < 0.0 {
                    return Err(format!("bad frequency {freq_hz}"));
                }
                if !amp_ok(*amplitude) {
                    return Err(format!("amplitude {amplitude} outside [0, 1]"));
                }
            }
            Signal::WhiteNoise { amplitude, .. } if !amp_ok(*amplitude) => {
                return Err(format!("amplitude {amplitude} outside [0, 1]"));
            }
            Signal::Mix(parts) => {
                if parts.is_empty() {
                    return Err("empty mix".into());
                }
                parts.iter().try_for_each(Signal::validate)?;
            }
            _ => {}
        }
        Ok(())
    }

    fn render_into(&self, out: &mut [f32], rate: u32) {
        match self {
            Signal::Sine { freq_hz, amplitude } => {
                let step = 2.0 * std::f64::consts::PI * freq_hz / rate as f64;
                for (i, x) in out.iter_mut().enumerate() {
                    *x = (*amplitude as f64 * (step * i as f64).sin()) as f32;
                }
            }
            Signal::WhiteNoise { amplitude, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                for x in out.iter_mut() {
                    *x = rng.gen_range(-1.0f32..=1.0) * amplitude;
                }
            }
            Signal::Silence => out.fill(0.0),
            Signal::Mix(parts) => {
                let mut acc = vec![0f64; out.len()];
                let mut part = vec![0f32; out.len()];
                for p in parts {
                    p.render_into(&mut part, rate);
                    for (a, x) in acc.iter_mut().zip(&part) {
                        *a += *x as f64;
                    }
                }
                for (x, a) in out.iter_mut().zip(acc) {
                    *x = a.clamp(-1.0, 1.0) as f32;
                }
            }
        }
    }
}

impl FromStr for Signal {
    type Err = String;

    /// `sine:<hz>[:<amp>]`, `noise[:<amp>[:<seed>]]` and `silence`, joined
    /// with `+` to mix.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split('+').map(str::trim).collect();
        if parts.len() > 1 {
            let sig = Signal::Mix(parts.into_iter().map(parse_one).collect::<Result<_, _>>()?);
            sig.validate()?;
            return Ok(sig);
        }
        let sig = parse_one(parts[0])?;
        sig.validate()?;
        Ok(sig)
    }
}

fn parse_one(s: &str) -> Result<Signal, String> {
    let fields: Vec<&str> = s.split(':').collect();
    let num = |i: usize, what: &str| -> Result<Option<f64>, String> {
        fields.get(i).map(|v| v.parse::<f64>().map_err(|_| format!("bad {what} {v:?} in {s:?}"))).transpose()
    };
    let sig = match fields[0] {
        "sine" => Signal::Sine {
            freq_hz: num(1, "frequency")?.ok_or_else(|| format!("{s:?} needs a frequency"))?,
            amplitude: num(2, "amplitude")?.map_or(DEFAULT_AMPLITUDE, |a| a as f32),
        },
        "noise" => Signal::WhiteNoise {
            amplitude: num(1, "amplitude")?.map_or(DEFAULT_AMPLITUDE, |a| a as f32),
            seed: match fields.get(2) {
                Some(v) => v.parse().map_err(|_| format!("bad seed {v:?} in {s:?}"))?,
                None => 0,
            },
        },
        "silence" if fields.len() == 1 => Signal::Silence,
        _ => return Err(format!("unknown signal {s:?}")),
    };
    let max_fields = if matches!(sig, Signal::Silence) { 1 } else { 3 };
    if fields.len() > max_fields {
        return Err(format!("too many fields in {s:?}"));
    }
    Ok(sig)
}

impl fmt::Display for Signal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Signal::Sine { freq_hz, amplitude } => write!(f, "sine:{freq_hz}:{amplitude}"),
            Signal::WhiteNoise { amplitude, seed } => write!(f, "noise:{amplitude}:{seed}"),
            Signal::Silence => f.write_str("silence"),
            Signal::Mix(parts) => {
                let items: Vec<String> = parts.iter().map(|p| p.to_string()).collect();
                f.write_str(&items.join("+"))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignalSpec {
    pub signal: Signal,
    pub duration_s: f64,
    pub sample_rate_hz: u32,
    pub channels: u32,
}

impl SignalSpec {
    pub fn new(signal: Signal, duration_s: f64) -> Self {
        SignalSpec { signal, duration_s, sample_rate_hz: 48_000, channels: 1 }
    }

    pub fn samples_per_channel(&self) -> usize {
        (self.duration_s * self.sample_rate_hz as f64).round() as usize
    }
}

/// Planar audio held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub sample_rate_hz: u32,
    pub channels: u32,
    /// Planar: all of channel 0, then channel 1, ...
    pub samples: Vec<f32>,
}

pub type WavClip = AudioClip;

impl AudioClip {
    pub fn mono(sample_rate_hz: u32, samples: Vec<f32>) -> Self {
        AudioClip { sample_rate_hz, channels: 1, samples }
    }

    pub fn samples_per_channel(&self) -> usize {
        self.samples.len() / self.channels.max(1) as usize
    }

    pub fn channel(&self, ch: usize) -> &[f32] {
        let n = self.samples_per_channel();
        &self.samples[ch * n..(ch + 1) * n]
    }

    pub fn duration(&self) -> Duration {
        Duration::from_secs_f64(self.samples_per_channel() as f64 / self.sample_rate_hz as f64)
    }
}

/// Renders `spec`. Every channel carries the same signal; noise is
/// reproducible from its seed.
pub fn render(spec: &SignalSpec) -> AudioClip {
    let n = spec.samples_per_channel();
    let mut mono = vec![0f32; n];
    spec.signal.render_into(&mut mono, spec.sample_rate_hz);
    let channels = spec.channels.max(1);
    let mut samples = Vec::with_capacity(n * channels as usize);
    for _ in 0..channels {
        samples.extend_from_slice(&mono);
    }
    AudioClip { sample_rate_hz: spec.sample_rate_hz, channels, samples }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WavError {
    #[error("unsupported WAV: {0}")]
    UnsupportedWav(String),
    #[error("malformed WAV: {0}")]
    ParseError(String),
}

const WAVE_PCM: u16 = 1;
const WAVE_FLOAT: u16 = 3;
const WAVE_EXTENSIBLE: u16 = 0xFFFE;

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

struct Fmt {
    codec: u16,
    channels: u16,
    rate: u32,
    bits: u16,
}

/// Decodes a little-endian RIFF/WAVE file holding 16-bit PCM or 32-bit float.
pub fn read_wav(bytes: &[u8]) -> Result<AudioClip, WavError> {
    use WavError::*;
    if bytes.len() < 12 {
        let prefix_of_riff = b"RIFF".starts_with(&bytes[..bytes.len().min(4)]);
        return Err(if prefix_of_riff {
            ParseError("truncated RIFF header".into())
        } else {
            UnsupportedWav("not a RIFF file".into())
        });
    }
    if &bytes[..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(UnsupportedWav("not a RIFF/WAVE file".into()));
    }
    let mut fmt = None;
    let mut data = None;
    let mut at = 12;
    while at + 8 <= bytes.len() {
        let id = &bytes[at..at + 4];
        let len = u32_at(bytes, at + 4) as usize;
        let body_start = at + 8;
        let body_end = body_start
            .checked_add(len)
            .filter(|end| *end <= bytes.len())
            .ok_or_else(|| ParseError(format!("chunk {:?} runs past end of file", String::from_utf8_lossy(id))))?;
        let body = &bytes[body_start..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(ParseError("fmt chunk too short".into()));
                }
                let mut codec = u16_at(body, 0);
                if codec == WAVE_EXTENSIBLE {
                    if body.len() < 26 {
                        return Err(ParseError("extensible fmt chunk too short".into()));
                    }
                    codec = u16_at(body, 24);
                }
                fmt = Some(Fmt { codec, channels: u16_at(body, 2), rate: u32_at(body, 4), bits: u16_at(body, 14) });
            }
            b"data" => data = Some(body),
            _ => {}
        }
        if fmt.is_some() && data.is_some() {
            break;
        }
        // Chunks are padded to even length.
        at = body_end + (len & 1);
    }
    let fmt = fmt.ok_or_else(|| UnsupportedWav("no fmt chunk".into()))?;
    let data = data.ok_or_else(|| UnsupportedWav("no data chunk".into()))?;
    let width = match (fmt.codec, fmt.bits) {
        (WAVE_PCM, 16) => 2,
        (WAVE_FLOAT, 32) => 4,
        (codec, bits) => return Err(UnsupportedWav(format!("codec {codec} with {bits} bits per sample"))),
    };
    if fmt.channels == 0 || fmt.rate == 0 {
        return Err(ParseError("zero channels or sample rate".into()));
    }
    let channels = fmt.channels as usize;
    let block = width * channels;
    if data.len() % block != 0 {
        return Err(ParseError(format!("data length {} is not a whole number of {block}-byte frames", data.len())));
    }
    let n = data.len() / block;
    let mut samples = vec![0f32; n * channels];
    for (i, chunk) in data.chunks_exact(width).enumerate() {
        let v = if width == 2 {
            i16::from_le_bytes([chunk[0], chunk[1]]) as f32 / 32768.0
        } else {
            f32::from_le_bytes(chunk.try_into().unwrap())
        };
        samples[(i % channels) * n + i / channels] = v;
    }
    Ok(AudioClip { sample_rate_hz: fmt.rate, channels: fmt.channels as u32, samples })
}

/// Writes a 32-bit float WAV file.
pub fn write_wav_f32(clip: &AudioClip) -> Vec<u8> {
    write_wav(clip, WAVE_FLOAT, 4, |s, out| out.extend_from_slice(&s.to_le_bytes()))
}

/// Writes a 16-bit PCM WAV file, clamping and scaling by 32768.
pub fn write_wav_pcm16(clip: &AudioClip) -> Vec<u8> {
    write_wav(clip, WAVE_PCM, 2, |s, out| {
        let v = (s as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&v.to_le_bytes())
    })
}

fn write_wav(clip: &AudioClip, codec: u16, width: u16, put: impl Fn(f32, &mut Vec<u8>)) -> Vec<u8> {
    let channels = clip.channels.max(1) as u16;
    let n = clip.samples_per_channel();
    let data_len = (n * channels as usize * width as usize) as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&codec.to_le_bytes());
    out.extend_from_slice(&channels.to_le_bytes());
    out.extend_from_slice(&clip.sample_rate_hz.to_le_bytes());
    out.extend_from_slice(&(clip.sample_rate_hz * (channels * width) as u32).to_le_bytes());
    out.extend_from_slice(&(channels * width).to_le_bytes());
    out.extend_from_slice(&(width * 8).to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for i in 0..n {
        for ch in 0..channels as usize {
            put(clip.samples[ch * n + i], &mut out);
        }
    }
    out
}

/// Splits a clip into audio frames of `frame_samples` per channel. The last
/// frame carries only the samples that remain.
pub fn clip_frames(clip: &AudioClip, frame_samples: usize, start_timestamp_100ns: u64) -> Vec<AudioFrame> {
    let n = clip.samples_per_channel();
    let frame_samples = frame_samples.max(1);
    (0..n)
        .step_by(frame_samples)
        .map(|offset| {
            let len = frame_samples.min(n - offset);
            let mut samples = Vec::with_capacity(len * clip.channels as usize);
            for ch in 0..clip.channels as usize {
                samples.extend_from_slice(&clip.channel(ch)[offset..offset + len]);
            }
            AudioFrame {
                timestamp_100ns: start_timestamp_100ns + samples_to_ticks(offset as u64, clip.sample_rate_hz),
                sample_rate_hz: clip.sample_rate_hz,
                channels: clip.channels,
                samples_per_channel: len as u32,
                samples,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Pacing {
    /// Send as fast as the sender accepts.
    Unpaced,
    /// Send frame `k` at `start + k · period / speed`.
    Realtime { speed: f64 },
}

#[derive(Debug, Clone)]
pub struct PlayOptions {
    pub frame_samples: usize,
    pub pacing: Pacing,
    /// Timestamp of the first frame; defaults to the wall clock at start.
    pub start_timestamp_100ns: Option<u64>,
    pub stop: Option<Arc<AtomicBool>>,
}

impl Default for PlayOptions {
    fn default() -> Self {
        PlayOptions {
            frame_samples: DEFAULT_FRAME_SAMPLES,
            pacing: Pacing::Unpaced,
            start_timestamp_100ns: None,
            stop: None,
        }
    }
}

impl PlayOptions {
    pub fn realtime() -> Self {
        PlayOptions { pacing: Pacing::Realtime { speed: 1.0 }, ..Default::default() }
    }
}

#[derive(Debug, Clone, Default)]
pub struct PlayReport {
    pub frames_sent: u64,
    /// Largest delay of a send behind its scheduled time.
    pub max_lateness: Duration,
    pub elapsed: Duration,
    pub stopped: bool,
}

/// Sends `clip` as audio frames. In realtime mode frames follow an absolute
/// schedule on the monotonic clock and the call returns at the clip's end.
pub fn play(sender: &Sender, clip: &AudioClip, opts: &PlayOptions) -> Result<PlayReport, CodecError> {
    let start_ts = opts.start_timestamp_100ns.unwrap_or_else(frames::now_100ns);
    let frames = clip_frames(clip, opts.frame_samples, start_ts);
    let start = Instant::now();
    let stopped = || opts.stop.as_ref().is_some_and(|s| s.load(Ordering::Relaxed));
    let at = |offset: usize| -> Option<Instant> {
        match opts.pacing {
            Pacing::Unpaced => None,
            Pacing::Realtime { speed } => {
                let secs = offset as f64 / clip.sample_rate_hz as f64 / speed.max(1e-6);
                Some(start + Duration::from_secs_f64(secs))
            }
        }
    };
    let mut report = PlayReport::default();
    let mut offset = 0usize;
    for frame in frames {
        if stopped() {
            report.stopped = true;
            break;
        }
        if let Some(due) = at(offset) {
            sleep_until(due);
            report.max_lateness = report.max_lateness.max(Instant::now().saturating_duration_since(due));
        }
        offset += frame.samples_per_channel as usize;
        sender.send_frame(&Frame::Audio(frame))?;
        report.frames_sent += 1;
    }
    if !report.stopped {
        if let Some(end) = at(offset) {
            sleep_until(end);
        }
    }
    report.elapsed = start.elapsed();
    Ok(report)
}

fn sleep_until(due: Instant) {
    let now = Instant::now();
    if due > now {
        std::thread::sleep(due - now);
    }
}
