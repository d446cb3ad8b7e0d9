//! The `tagstream` command line.
//!
//! Settings resolve in the order flag, `TSRM_*` environment variable,
//! `key=value` config file, built-in default. The environment variable for
//! a setting is its flag name upper-cased with `-` turned into `_`, so
//! `--window-samples` reads `TSRM_WINDOW_SAMPLES`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::bench::{self, BenchError, BenchPlan};
use crate::discovery::{DiscoveryConfig, Finder};
use crate::frames::Frame;
use crate::relay::{self, InputSpec, RelayConfig, BACKOFF_INITIAL, BACKOFF_MAX};
use crate::sources::{self, AudioClip, Pacing, PlayOptions, Signal, SignalSpec};
use crate::tagging::external;
use crate::tagging::xml::{self, XmlError};
use crate::tagging::TaggerSpec;
use crate::transport::{self, KindMask, ReceiverConfig, Recv, SenderConfig};
use crate::windowing::WindowConfig;

pub const ENV_PREFIX: &str = "TSRM_";
pub const CONFIG_ENV: &str = "TSRM_CONFIG";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Usage(_) | CliError::NotFound(_) => 2,
        }
    }
}

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "tagstream", version, about = "Media-over-IP streams with an audio-tagging relay")]
pub struct Cli {
    /// key=value file read for settings not given as flags or TSRM_* variables
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// More log output on standard error (repeatable)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// List sources announced on the network
    Find(FindArgs),
    /// Stream a synthetic signal or a WAV file
    Send(SendArgs),
    /// Forward a source unchanged and add audio tag metadata
    Relay(RelayArgs),
    /// Print the tag metadata carried by a stream
    Monitor(MonitorArgs),
    /// Measure tagger latency over a range of buffer sizes
    Bench(BenchArgs),
    /// Answer external-tagger requests on stdin/stdout
    ServeTagger(ServeTaggerArgs),
}

#[derive(Debug, Args)]
pub struct DiscoveryArgs {
    /// UDP discovery port [env TSRM_DISCOVERY_PORT] [default 5959]
    #[arg(long)]
    pub discovery_port: Option<u16>,
    /// Seconds between announcements [default 1]
    #[arg(long)]
    pub announce_interval: Option<f64>,
}

#[derive(Debug, Args)]
pub struct FindArgs {
    /// Seconds to listen [default 2]
    #[arg(long)]
    pub timeout: Option<f64>,
    /// Only list sources in this group
    #[arg(long)]
    pub group: Option<String>,
    #[command(flatten)]
    pub discovery: DiscoveryArgs,
}

#[derive(Debug, Args)]
pub struct SendArgs {
    /// Source name to announce [env TSRM_NAME]
    #[arg(long)]
    pub name: Option<String>,
    /// Discovery group [default public]
    #[arg(long)]
    pub group: Option<String>,
    /// Signal such as sine:440:0.5, noise:0.2:7, silence, or a sum joined by +
    #[arg(long, conflicts_with = "wav")]
    pub signal: Option<String>,
    /// WAV file (16-bit PCM or 32-bit float)
    #[arg(long)]
    pub wav: Option<PathBuf>,
    /// Signal length in seconds [default 10]
    #[arg(long)]
    pub duration: Option<f64>,
    /// Signal sample rate [default 48000]
    #[arg(long)]
    pub rate: Option<u32>,
    /// Signal channel count [default 1]
    #[arg(long)]
    pub channels: Option<u32>,
    /// Samples per channel in each frame [default 1024]
    #[arg(long)]
    pub frame_samples: Option<usize>,
    /// Pace frames at the audio rate
    #[arg(long)]
    pub realtime: bool,
    /// Pacing speed-up factor in realtime mode [default 1]
    #[arg(long)]
    pub speed: Option<f64>,
    /// Repeat until interrupted
    #[arg(long = "loop")]
    pub repeat: bool,
    /// TCP port [default 0, ephemeral]
    #[arg(long)]
    pub port: Option<u16>,
    /// Seconds to wait for a first subscriber before playing [default 0]
    #[arg(long)]
    pub wait: Option<f64>,
    #[command(flatten)]
    pub discovery: DiscoveryArgs,
}

#[derive(Debug, Args)]
pub struct RelayArgs {
    /// Source as group/name, name, or host:port [env TSRM_INPUT]
    #[arg(long)]
    pub input: Option<String>,
    /// Name announced for the relayed stream [env TSRM_OUTPUT_NAME]
    #[arg(long)]
    pub output_name: Option<String>,
    /// Group of the relayed stream [default public]
    #[arg(long)]
    pub output_group: Option<String>,
    /// TCP port of the relayed stream [default 0, ephemeral]
    #[arg(long)]
    pub port: Option<u16>,
    /// Samples per analysis window [env TSRM_WINDOW_SAMPLES] [default 48128]
    #[arg(long)]
    pub window_samples: Option<usize>,
    /// Samples between window ends [default window_samples]
    #[arg(long)]
    pub hop_samples: Option<usize>,
    /// reference, sleep:<ms>, work:<passes> or external:<command> [env TSRM_TAGGER]
    #[arg(long)]
    pub tagger: Option<String>,
    /// Windows waiting for the tagger before the oldest is dropped [default 4]
    #[arg(long)]
    pub queue_depth: Option<usize>,
    /// Tags per window [default 5]
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Seconds between JSON stats lines on stderr, 0 to disable [default 5]
    #[arg(long)]
    pub stats_interval: Option<f64>,
    #[command(flatten)]
    pub discovery: DiscoveryArgs,
}

#[derive(Debug, Args)]
pub struct MonitorArgs {
    /// Stream as group/name, name, or host:port [env TSRM_SOURCE]
    #[arg(long)]
    pub source: Option<String>,
    /// Comma-separated frame kinds to print [default metadata]
    #[arg(long)]
    pub kinds: Option<String>,
    /// Exit after this many printed lines
    #[arg(long)]
    pub count: Option<u64>,
    /// Exit after this many seconds
    #[arg(long)]
    pub duration: Option<f64>,
    #[command(flatten)]
    pub discovery: DiscoveryArgs,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Comma-separated buffer sizes in samples [default 1024,2048,...,98304]
    #[arg(long)]
    pub sizes: Option<String>,
    /// Timed repetitions per size [default 30]
    #[arg(long)]
    pub reps: Option<usize>,
    /// Untimed repetitions per size [default 3]
    #[arg(long)]
    pub warmup: Option<usize>,
    /// Tagger to measure [env TSRM_TAGGER] [default reference]
    #[arg(long)]
    pub tagger: Option<String>,
    /// Test signal [default sine:440:0.5]
    #[arg(long)]
    pub signal: Option<String>,
    /// CSV destination, - for standard output [default -]
    #[arg(long)]
    pub out: Option<String>,
}

#[derive(Debug, Args)]
pub struct ServeTaggerArgs {
    /// In-process tagger to serve [default reference]
    #[arg(long)]
    pub tagger: Option<String>,
}

/// The environment and config-file layers under the command-line flags.
#[derive(Debug, Clone, Default)]
pub struct Layers {
    pub env: HashMap<String, String>,
    pub file: HashMap<String, String>,
}

pub fn env_var_name(key: &str) -> String {
    format!("{ENV_PREFIX}{}", key.to_ascii_uppercase().replace('-', "_"))
}

/// Parses `key=value` lines. Blank lines and `#` comments are skipped; keys
/// may use `-` or `_`.
pub fn parse_config_file(text: &str) -> Result<HashMap<String, String>, String> {
    let mut map = HashMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| format!("line {}: expected key=value", n + 1))?;
        map.insert(k.trim().to_ascii_lowercase().replace('_', "-"), v.trim().to_string());
    }
    Ok(map)
}

impl Layers {
    /// Reads non-empty `TSRM_*` variables and the config file named by `--config` or
    /// `TSRM_CONFIG`.
    pub fn from_process(config: Option<&Path>) -> Result<Self, CliError> {
        let env: HashMap<String, String> =
            std::env::vars().filter(|(k, v)| k.starts_with(ENV_PREFIX) && !v.is_empty()).collect();
        let path = config.map(Path::to_path_buf).or_else(|| env.get(CONFIG_ENV).map(PathBuf::from));
        let file = match path {
            Some(p) => {
                let text = std::fs::read_to_string(&p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                parse_config_file(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
            }
            None => HashMap::new(),
        };
        Ok(Layers { env, file })
    }

    /// The highest-precedence value for `key`, or `None` if no layer sets it.
    pub fn get<T: FromStr>(&self, key: &str, flag: Option<T>) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        let var = env_var_name(key);
        let (raw, origin) = match (self.env.get(&var), self.file.get(key)) {
            (Some(v), _) => (v, var),
            (None, Some(v)) => (v, format!("config key {key}")),
            (None, None) => return Ok(None),
        };
        raw.parse().map(Some).map_err(|e| CliError::Usage(format!("{origin}={raw:?}: {e}")))
    }

    pub fn get_or<T: FromStr>(&self, key: &str, flag: Option<T>, default: T) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.get(key, flag)?.unwrap_or(default))
    }

    fn require<T: FromStr>(&self, key: &str, flag: Option<T>) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key, flag)?
            .ok_or_else(|| CliError::Usage(format!("--{key} is required (or set {})", env_var_name(key))))
    }

    pub fn discovery(&self, args: &DiscoveryArgs) -> Result<DiscoveryConfig, CliError> {
        let mut cfg =
            DiscoveryConfig::default().with_port(self.get_or("discovery-port", args.discovery_port, cfg_port())?);
        if let Some(secs) = self.get::<f64>("announce-interval", args.announce_interval)? {
            cfg = cfg.with_interval(seconds("announce-interval", secs)?);
        }
        Ok(cfg)
    }
}

fn cfg_port() -> u16 {
    DiscoveryConfig::default().port
}

fn seconds(key: &str, secs: f64) -> Result<Duration, CliError> {
    Duration::try_from_secs_f64(secs).map_err(|_| CliError::Usage(format!("--{key} {secs} is not a valid duration")))
}

/// Parses `--sizes`: positive integers separated by commas.
pub fn parse_sizes(s: &str) -> Result<Vec<usize>, String> {
    let sizes = s
        .split(',')
        .map(|p| {
            let p = p.trim();
            match p.parse::<usize>() {
                Ok(0) => Err("buffer sizes must be positive".to_string()),
                Ok(n) => Ok(n),
                Err(_) => Err(format!("bad buffer size {p:?}")),
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    if sizes.is_empty() {
        return Err("no buffer sizes".into());
    }
    Ok(sizes)
}

/// Shutdown flag set by SIGINT/SIGTERM.
fn shutdown_flag() -> Arc<AtomicBool> {
    let flag = Arc::new(AtomicBool::new(false));
    let f = Arc::clone(&flag);
    if let Err(e) = ctrlc::set_handler(move || f.store(true, Ordering::SeqCst)) {
        log::warn!("cannot install signal handler: {e}");
    }
    flag
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .try_init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("tagstream: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<i32, CliError> {
    let layers = Layers::from_process(cli.config.as_deref())?;
    match cli.command {
        Command::Find(a) => cmd_find(&layers, &a),
        Command::Send(a) => cmd_send(&layers, &a),
        Command::Relay(a) => cmd_relay(&layers, &a),
        Command::Monitor(a) => cmd_monitor(&layers, &a),
        Command::Bench(a) => cmd_bench(&layers, &a),
        Command::ServeTagger(a) => cmd_serve_tagger(&layers, &a),
    }
}

fn cmd_find(layers: &Layers, a: &FindArgs) -> Result<i32, CliError> {
    let timeout = seconds("timeout", layers.get_or("timeout", a.timeout, 2.0)?)?;
    let group: Option<String> = layers.get("group", a.group.clone())?;
    let finder = Finder::bind(&layers.discovery(&a.discovery)?).map_err(runtime)?;
    thread::sleep(timeout);
    let sources: Vec<_> =
        finder.poll_sources().into_iter().filter(|s| group.as_ref().is_none_or(|g| *g == s.group)).collect();
    let mut out = io::stdout().lock();
    for s in &sources {
        writeln!(out, "{}/{} {}", s.group, s.name, s.endpoint()).map_err(runtime)?;
    }
    if sources.is_empty() {
        return Err(CliError::NotFound(format!("no sources found within {timeout:?}")));
    }
    Ok(0)
}

fn load_clip(layers: &Layers, a: &SendArgs) -> Result<AudioClip, CliError> {
    let wav: Option<PathBuf> = layers.get("wav", a.wav.clone())?;
    let signal: Option<String> = layers.get("signal", a.signal.clone())?;
    match (wav, signal) {
        (Some(_), Some(_)) => Err(CliError::Usage("--signal and --wav are mutually exclusive".into())),
        (Some(path), None) => {
            let bytes =
                std::fs::read(&path).map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", path.display())))?;
            sources::read_wav(&bytes).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
        }
        (None, signal) => {
            let signal: Signal = signal.as_deref().unwrap_or("sine:440:0.5").parse().map_err(CliError::Usage)?;
            let duration = layers.get_or("duration", a.duration, 10.0)?;
            if !(duration.is_finite() && duration > 0.0) {
                return Err(CliError::Usage(format!("--duration {duration} must be positive")));
            }
            let spec = SignalSpec {
                signal,
                duration_s: duration,
                sample_rate_hz: layers.get_or("rate", a.rate, 48_000)?,
                channels: layers.get_or("channels", a.channels, 1)?,
            };
            if spec.sample_rate_hz == 0 || spec.channels == 0 {
                return Err(CliError::Usage("--rate and --channels must be positive".into()));
            }
            Ok(sources::render(&spec))
        }
    }
}

fn cmd_send(layers: &Layers, a: &SendArgs) -> Result<i32, CliError> {
    let name: String = layers.require("name", a.name.clone())?;
    let group = layers.get_or("group", a.group.clone(), crate::discovery::DEFAULT_GROUP.to_string())?;
    let clip = load_clip(layers, a)?;
    let frame_samples = layers.get_or("frame-samples", a.frame_samples, sources::DEFAULT_FRAME_SAMPLES)?;
    if frame_samples == 0 {
        return Err(CliError::Usage("--frame-samples must be positive".into()));
    }
    let speed = layers.get_or("speed", a.speed, 1.0)?;
    if !(speed.is_finite() && speed > 0.0) {
        return Err(CliError::Usage(format!("--speed {speed} must be positive")));
    }
    let cfg = SenderConfig::new(&name)
        .group(&group)
        .port(layers.get_or("port", a.port, 0)?)
        .announce(layers.discovery(&a.discovery)?);
    let sender = transport::create_sender(cfg).map_err(runtime)?;
    eprintln!("sending {} on port {}", sender.advertisement(), sender.port());
    let stop = shutdown_flag();
    if let Some(wait) = layers.get::<f64>("wait", a.wait)? {
        let wait = seconds("wait", wait)?;
        if !sender.wait_for_subscribers(1, wait) {
            log::warn!("no subscriber after {wait:?}; playing anyway");
        }
    }
    let opts = PlayOptions {
        frame_samples,
        pacing: if a.realtime { Pacing::Realtime { speed } } else { Pacing::Unpaced },
        start_timestamp_100ns: None,
        stop: Some(Arc::clone(&stop)),
    };
    let mut total = 0;
    loop {
        let report = sources::play(&sender, &clip, &opts).map_err(runtime)?;
        total += report.frames_sent;
        if !a.repeat || report.stopped || stop.load(Ordering::Relaxed) {
            break;
        }
    }
    log::info!("sent {total} audio frames");
    sender.close();
    Ok(0)
}

fn cmd_relay(layers: &Layers, a: &RelayArgs) -> Result<i32, CliError> {
    let input: InputSpec = layers.require::<String>("input", a.input.clone())?.parse().map_err(CliError::Usage)?;
    let output_name: String = layers.require("output-name", a.output_name.clone())?;
    let mut cfg = RelayConfig::new(input, &output_name);
    cfg.output_group = layers.get_or("output-group", a.output_group.clone(), cfg.output_group)?;
    cfg.output_port = layers.get_or("port", a.port, 0)?;
    let window_samples = layers.get_or("window-samples", a.window_samples, cfg.window.window_samples)?;
    let hop_samples = layers.get_or("hop-samples", a.hop_samples, window_samples)?;
    cfg.window = WindowConfig { window_samples, hop_samples, ..WindowConfig::default() };
    cfg.tagger = layers.get_or(
        "tagger",
        a.tagger.as_deref().map(str::parse).transpose().map_err(CliError::Usage)?,
        TaggerSpec::Reference,
    )?;
    cfg.queue_depth = layers.get_or("queue-depth", a.queue_depth, cfg.queue_depth)?;
    cfg.top_k = layers.get_or("top-k", a.top_k, cfg.top_k)?;
    let interval = layers.get_or("stats-interval", a.stats_interval, 5.0)?;
    cfg.stats_interval = if interval > 0.0 { Some(seconds("stats-interval", interval)?) } else { None };
    cfg.discovery = layers.discovery(&a.discovery)?;
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;

    let stop = shutdown_flag();
    let handle = relay::start_relay(cfg).map_err(runtime)?;
    eprintln!("relaying as {} on port {}", handle.advertisement(), handle.output_addr().port());
    while !stop.load(Ordering::Relaxed) {
        thread::sleep(Duration::from_millis(50));
    }
    let stats = handle.stop();
    log::info!("final stats: {}", serde_json::to_string(&stats.report()).unwrap_or_default());
    Ok(0)
}

/// One monitor output line for a tag frame.
pub fn format_tag_line(parsed: &xml::ParsedTags) -> String {
    let mut line = format!("ts={} src={}", parsed.result.window_start_timestamp_100ns, parsed.source_name);
    for p in &parsed.result.predictions {
        line.push_str(&format!(" {}:{:.4}", p.label, p.score));
    }
    line
}

fn monitor_line(frame: &Frame) -> Option<String> {
    match frame {
        Frame::Metadata(m) => match xml::parse_metadata_xml(m) {
            Ok(parsed) => Some(format_tag_line(&parsed)),
            Err(XmlError::NotTagMetadata(_)) => None,
            Err(e) => {
                log::warn!("{e}");
                None
            }
        },
        Frame::Audio(a) => Some(format!(
            "audio ts={} rate={} channels={} samples={}",
            a.timestamp_100ns, a.sample_rate_hz, a.channels, a.samples_per_channel
        )),
        Frame::Video(v) => Some(format!(
            "video ts={} {}x{} fourcc={} bytes={}",
            v.timestamp_100ns,
            v.width,
            v.height,
            String::from_utf8_lossy(&v.fourcc),
            v.data.len()
        )),
    }
}

fn cmd_monitor(layers: &Layers, a: &MonitorArgs) -> Result<i32, CliError> {
    let source: InputSpec = layers.require::<String>("source", a.source.clone())?.parse().map_err(CliError::Usage)?;
    let kinds: KindMask = layers
        .get("kinds", a.kinds.as_deref().map(str::parse).transpose().map_err(CliError::Usage)?)?
        .unwrap_or(KindMask::only(crate::frames::FrameKind::Metadata));
    let count: Option<u64> = layers.get("count", a.count)?;
    let deadline = layers
        .get::<f64>("duration", a.duration)?
        .map(|s| seconds("duration", s))
        .transpose()?
        .map(|d| Instant::now() + d);
    let discovery = layers.discovery(&a.discovery)?;
    let finder = match &source {
        InputSpec::Named { .. } => Some(Finder::bind(&discovery).map_err(runtime)?),
        InputSpec::Addr(_) => None,
    };
    let stop = shutdown_flag();
    let expired = || stop.load(Ordering::Relaxed) || deadline.is_some_and(|d| Instant::now() >= d);
    let rx_cfg = ReceiverConfig::default().kinds(kinds);
    let mut printed = 0u64;
    let mut backoff = BACKOFF_INITIAL;
    let mut out = io::stdout().lock();
    while !expired() {
        let addr = match (&source, &finder) {
            (InputSpec::Addr(a), _) => Some(*a),
            (InputSpec::Named { group, name }, Some(f)) => f
                .wait_for(discovery.announce_interval, |s| s.iter().any(|x| x.group == *group && x.name == *name))
                .and_then(|_| f.lookup(group, name))
                .map(|s| s.endpoint()),
            _ => None,
        };
        let session = addr
            .ok_or_else(|| format!("{source} not found"))
            .and_then(|addr| transport::connect_addr(&rx_cfg, addr).map_err(|e| e.to_string()));
        let mut session = match session {
            Ok(s) => s,
            Err(e) => {
                log::warn!("{e}; retrying in {backoff:?}");
                let until = Instant::now() + backoff;
                while Instant::now() < until && !expired() {
                    thread::sleep(Duration::from_millis(20));
                }
                backoff = (backoff * 2).min(BACKOFF_MAX);
                continue;
            }
        };
        backoff = BACKOFF_INITIAL;
        log::info!("monitoring {}", session.peer());
        while !expired() {
            match session.recv_frame(Duration::from_millis(50)) {
                Recv::Frame(frame) => {
                    if let Some(line) = monitor_line(&frame) {
                        writeln!(out, "{line}").map_err(runtime)?;
                        out.flush().map_err(runtime)?;
                        printed += 1;
                        if count.is_some_and(|c| printed >= c) {
                            return Ok(0);
                        }
                    }
                }
                Recv::Timeout => {}
                Recv::EndOfStream => {
                    log::warn!("{source} ended; reconnecting");
                    break;
                }
            }
        }
    }
    Ok(0)
}

fn cmd_bench(layers: &Layers, a: &BenchArgs) -> Result<i32, CliError> {
    let mut plan = BenchPlan::default();
    if let Some(sizes) = layers.get::<String>("sizes", a.sizes.clone())? {
        plan.buffer_sizes = parse_sizes(&sizes).map_err(CliError::Usage)?;
    }
    plan.repetitions = layers.get_or("reps", a.reps, plan.repetitions)?;
    plan.warmup = layers.get_or("warmup", a.warmup, plan.warmup)?;
    let tagger_text = layers.get_or("tagger", a.tagger.clone(), "reference".to_string())?;
    plan.tagger = tagger_text.parse().map_err(CliError::Usage)?;
    if let Some(sig) = layers.get::<String>("signal", a.signal.clone())? {
        plan.signal = sig.parse().map_err(CliError::Usage)?;
    }
    plan.validate().map_err(CliError::Usage)?;
    let out_path = layers.get_or("out", a.out.clone(), "-".to_string())?;
    let host = bench::host_descriptor();
    eprintln!("# host={host}");

    let (records, failure) = match bench::run_bench(&plan) {
        Ok(r) => (r, None),
        Err(BenchError::Tagger { partial, buffer_samples, source }) => {
            (partial, Some(format!("tagger failed at {buffer_samples} samples: {source}")))
        }
        Err(e) => return Err(CliError::Usage(e.to_string())),
    };
    let write = |w: &mut dyn Write| bench::write_csv(&records, &tagger_text, &host, w);
    if out_path == "-" {
        write(&mut io::stdout().lock()).map_err(runtime)?;
    } else {
        let f = File::create(&out_path).map_err(|e| CliError::Runtime(format!("cannot create {out_path}: {e}")))?;
        write(&mut BufWriter::new(f)).map_err(runtime)?;
    }
    if let Some(rho) = bench::size_latency_trend(&records) {
        eprintln!("spearman(buffer_samples, median_ms) = {rho:.4}");
    }
    match failure {
        Some(msg) => Err(CliError::Runtime(msg)),
        None => Ok(0),
    }
}

fn cmd_serve_tagger(layers: &Layers, a: &ServeTaggerArgs) -> Result<i32, CliError> {
    let spec: TaggerSpec = layers.get_or(
        "tagger",
        a.tagger.as_deref().map(str::parse).transpose().map_err(CliError::Usage)?,
        TaggerSpec::Reference,
    )?;
    if matches!(spec, TaggerSpec::External(_)) {
        return Err(CliError::Usage("serve-tagger cannot serve an external tagger".into()));
    }
    let mut tagger = spec.build();
    let stdin = io::stdin().lock();
    let stdout = io::stdout().lock();
    external::serve(stdin, stdout, tagger.as_mut()).map_err(runtime)?;
    Ok(0)
}
