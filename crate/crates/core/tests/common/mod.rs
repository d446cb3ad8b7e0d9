#![allow(dead_code)]

use std::f64::consts::PI;
use std::net::{IpAddr, Ipv4Addr, SocketAddr, UdpSocket};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use tagstream::frames::{self, AudioFrame, EncodedFrame, Frame, MetadataFrame, VideoFrame};
use tagstream::transport::{self, Received, ReceiverConfig, Recv, Sender, SenderConfig};

pub const RATE: u32 = 48_000;

/// Brute-force spectral quantities, computed with a direct DFT and no
/// shared code with the tagger under test.
pub struct OracleSpectrum {
    pub rms: f64,
    pub flatness: f64,
    pub bands: [f64; 3],
    pub bins: usize,
}

pub fn oracle_spectrum(x: &[f32], rate: u32) -> OracleSpectrum {
    let n = x.len();
    let rms = (x.iter().map(|&v| v as f64 * v as f64).sum::<f64>() / n.max(1) as f64).sqrt();
    let cos: Vec<f64> = (0..n).map(|j| (2.0 * PI * j as f64 / n as f64).cos()).collect();
    let sin: Vec<f64> = (0..n).map(|j| (2.0 * PI * j as f64 / n as f64).sin()).collect();
    let edges = [20.0, 250.0, 2000.0, 8000.0];
    let mut bands = [0.0; 3];
    let mut log_sum = 0.0;
    let mut lin_sum = 0.0;
    let mut bins = 0;
    for k in 0..=n / 2 {
        let f = k as f64 * rate as f64 / n as f64;
        if !(20.0..8000.0).contains(&f) {
            continue;
        }
        let (mut re, mut im) = (0.0, 0.0);
        let mut idx = 0usize;
        for &v in x {
            re += v as f64 * cos[idx];
            im -= v as f64 * sin[idx];
            idx += k;
            if idx >= n {
                idx -= n;
            }
        }
        let p = re * re + im * im;
        log_sum += (p + 1e-20).ln();
        lin_sum += p + 1e-20;
        bins += 1;
        for b in 0..3 {
            if f >= edges[b] && f < edges[b + 1] {
                bands[b] += p;
            }
        }
    }
    let flatness = if bins == 0 { 0.0 } else { (log_sum / bins as f64).exp() / (lin_sum / bins as f64) };
    OracleSpectrum { rms, flatness, bands, bins }
}

/// The label the decision rule must pick for `x`.
pub fn oracle_top_label(x: &[f32], rate: u32) -> &'static str {
    let s = oracle_spectrum(x, rate);
    if s.rms < 1e-4 {
        return "Silence";
    }
    let total: f64 = s.bands.iter().sum();
    if s.flatness > 0.5 || total <= 0.0 {
        return "Noise";
    }
    let names = ["ToneLow", "ToneMid", "ToneHigh"];
    let mut best = 0;
    for b in 1..3 {
        // Ties go to the lexicographically smaller label.
        if s.bands[b] > s.bands[best] || (s.bands[b] == s.bands[best] && names[b] < names[best]) {
            best = b;
        }
    }
    names[best]
}

pub fn sine(freq: f64, amp: f64, n: usize, rate: u32) -> Vec<f32> {
    (0..n).map(|i| (amp * (2.0 * PI * freq * i as f64 / rate as f64).sin()) as f32).collect()
}

pub fn noise(amp: f32, n: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-amp..=amp)).collect()
}

/// A UDP port nobody else is using right now.
pub fn free_udp_port() -> u16 {
    UdpSocket::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

pub fn loopback() -> IpAddr {
    IpAddr::V4(Ipv4Addr::LOCALHOST)
}

pub fn loopback_sender(name: &str) -> Sender {
    transport::create_sender(SenderConfig::new(name).bind_ip(loopback())).unwrap()
}

/// Mixed audio and video frames whose payloads encode their sequence number.
pub fn sequence_frames(seconds: f64, video_fps: f64, start_ts: u64) -> Vec<Frame> {
    let audio_period = 1024.0 / RATE as f64;
    let n_audio = (seconds / audio_period).floor() as usize;
    let n_video = (seconds * video_fps).floor() as usize;
    let mut out: Vec<(f64, Frame)> = Vec::new();
    for k in 0..n_audio {
        let t = k as f64 * audio_period;
        let mut samples = sine(440.0, 0.5, 1024, RATE);
        // Shift the phase so every frame is distinct and continuous.
        let offset = k * 1024;
        for (i, s) in samples.iter_mut().enumerate() {
            *s = (0.5 * (2.0 * PI * 440.0 * (offset + i) as f64 / RATE as f64).sin()) as f32;
        }
        let ts = start_ts + (t * 1e7).round() as u64;
        out.push((t, Frame::Audio(AudioFrame::mono(ts, RATE, samples))));
    }
    for k in 0..n_video {
        let t = k as f64 / video_fps;
        let mut data = vec![0u8; 64 * 36 * 2];
        data[..8].copy_from_slice(&(k as u64).to_le_bytes());
        for (i, b) in data.iter_mut().enumerate().skip(8) {
            *b = (i as u64 * 31 + k as u64) as u8;
        }
        let ts = start_ts + (t * 1e7).round() as u64;
        out.push((t, Frame::Video(VideoFrame { timestamp_100ns: ts, width: 64, height: 36, fourcc: *b"UYVY", data })));
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out.into_iter().map(|(_, f)| f).collect()
}

pub fn foreign_metadata(ts: u64) -> Frame {
    Frame::Metadata(MetadataFrame::new(ts, "<camera_info lens=\"wide\"/>"))
}

pub fn digest<'a>(frames: impl IntoIterator<Item = &'a [u8]>) -> String {
    let mut h = Sha256::new();
    for f in frames {
        h.update(f);
    }
    format!("{:x}", h.finalize())
}

pub fn encode_all(frames: &[Frame]) -> Vec<EncodedFrame> {
    frames.iter().map(|f| frames::encode_frame(f).unwrap()).collect()
}

/// Whether `frame` is a tag frame injected by the relay named `relay_name`.
pub fn is_injected(frame: &Frame, relay_name: &str) -> bool {
    match frame {
        Frame::Metadata(m) => {
            tagstream::tagging::xml::parse_metadata_xml(m).map(|p| p.source_name == relay_name).unwrap_or(false)
        }
        _ => false,
    }
}

/// Reads a session to its end on a background thread.
pub fn collect(addr: SocketAddr, cfg: ReceiverConfig) -> (JoinHandle<Vec<Received>>, std::sync::mpsc::Receiver<()>) {
    let mut session = transport::connect_addr(&cfg, addr).unwrap();
    let (ready_tx, ready_rx) = std::sync::mpsc::channel();
    let h = thread::spawn(move || {
        let _ = ready_tx.send(());
        let mut got = Vec::new();
        loop {
            match session.recv(Duration::from_secs(60)) {
                Recv::Frame(r) => got.push(r),
                Recv::Timeout => panic!("no frame for 60 s"),
                Recv::EndOfStream => return got,
            }
        }
    });
    (h, ready_rx)
}

pub fn wait_until(timeout: Duration, mut pred: impl FnMut() -> bool) -> bool {
    let deadline = Instant::now() + timeout;
    while !pred() {
        if Instant::now() >= deadline {
            return false;
        }
        thread::sleep(Duration::from_millis(10));
    }
    true
}

/// Nearest-rank quantile of unsorted values.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

/// Child processes of this test process whose command name is `comm`.
pub fn child_pids(comm: &str) -> Vec<u32> {
    let me = std::process::id();
    let mut out = Vec::new();
    for entry in std::fs::read_dir("/proc").unwrap().flatten() {
        let Ok(pid) = entry.file_name().to_string_lossy().parse::<u32>() else { continue };
        let Ok(stat) = std::fs::read_to_string(format!("/proc/{pid}/stat")) else { continue };
        // Format: pid (comm) state ppid ...
        let (Some(open), Some(close)) = (stat.find('('), stat.rfind(')')) else { continue };
        let name = &stat[open + 1..close];
        let ppid: u32 = stat[close + 2..].split_whitespace().nth(1).and_then(|p| p.parse().ok()).unwrap_or(0);
        if ppid == me && name == comm {
            out.push(pid);
        }
    }
    out
}

/// A relay reading `input` and serving on an ephemeral loopback port,
/// without announcing or printing stats.
pub fn loopback_relay_config(input: SocketAddr, name: &str) -> tagstream::relay::RelayConfig {
    let mut cfg = tagstream::relay::RelayConfig::new(tagstream::relay::InputSpec::Addr(input), name);
    cfg.output_bind = loopback();
    cfg.announce = false;
    cfg.stats_interval = None;
    cfg
}
