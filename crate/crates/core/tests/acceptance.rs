//! The acceptance criteria, run in sequence so timing-sensitive checks do
//! not compete with each other. One PASS/FAIL line per criterion goes to
//! the real stdout, bypassing the test harness capture.

mod common;

use std::io::Write;
use std::panic::{self, AssertUnwindSafe};
use std::thread;
use std::time::{Duration, Instant};

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tagstream::bench::{run_bench, size_latency_trend, BenchPlan, LatencyRecord};
use tagstream::discovery::{start_announcer, DiscoveryConfig, Finder, SourceAdvertisement};
use tagstream::frames::{decode_frame, encode_frame, AudioFrame, Frame, FrameKind, MetadataFrame, VideoFrame};
use tagstream::relay::{start_relay, RelayConfig, RelayStats};
use tagstream::tagging::reference::ReferenceSpectralTagger;
use tagstream::tagging::xml::{build_metadata_xml, parse_metadata_xml};
use tagstream::tagging::{TagPrediction, TagResult, Tagger, TaggerSpec};
use tagstream::transport::{Received, ReceiverConfig, Sender};
use tagstream::windowing::{samples_to_ticks, WindowConfig, Windower};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn report(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn criterion(n: u32, title: &str, budget: Duration, f: impl FnOnce() -> Check) -> bool {
    let t = Instant::now();
    let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let took = t.elapsed();
    let outcome = match outcome {
        Ok(d) if took > budget => Err(format!("{d}; took {took:.2?}, budget {budget:?}")),
        other => other,
    };
    let (ok, detail) = match &outcome {
        Ok(d) => (true, d.as_str()),
        Err(d) => (false, d.as_str()),
    };
    report(&format!("{} C{n} {title} [{took:.2?}] {detail}", if ok { "PASS" } else { "FAIL" }));
    ok
}

#[test]
fn acceptance() {
    let results = [
        criterion(1, "window constant", Duration::from_secs(1), c1_window_constant),
        criterion(2, "pass-through bit-exactness", Duration::from_secs(30), c2_pass_through),
        criterion(3, "non-blocking side-chain", Duration::from_secs(60), c3_side_chain),
        criterion(4, "latency-vs-buffer trend", Duration::from_secs(300), c4_bench_trend),
        criterion(5, "codec and XML round-trips", Duration::from_secs(10), c5_round_trips),
        criterion(6, "reference-tagger oracle", Duration::from_secs(30), c6_oracle),
        criterion(7, "discovery liveness/expiry", Duration::from_secs(15), c7_discovery),
        criterion(8, "fault containment", Duration::from_secs(60), c8_fault_containment),
        criterion(9, "windowing conservation", Duration::from_secs(5), c9_conservation),
    ];
    let passed = results.iter().filter(|&&r| r).count();
    report(&format!("acceptance: {passed}/{} criteria passed", results.len()));
    assert_eq!(passed, results.len());
}

fn c1_window_constant() -> Check {
    let frames: Vec<AudioFrame> =
        (0..47u64).map(|k| AudioFrame::mono(samples_to_ticks(k * 1024, RATE), RATE, vec![0.25; 1024])).collect();
    let mut w = Windower::new(WindowConfig::default()).map_err(|e| e.to_string())?;
    for f in &frames[..46] {
        w.push_frame(f).map_err(|e| e.to_string())?;
    }
    ensure(w.try_take_window().is_none(), || "46 frames produced a window".into())?;
    w.push_frame(&frames[46]).map_err(|e| e.to_string())?;
    let win = w.try_take_window().ok_or("47 frames produced no window")?;
    ensure(w.try_take_window().is_none(), || "47 frames produced a second window".into())?;
    ensure(win.len() == 48128, || format!("window has {} samples", win.len()))?;
    Ok(format!("46 frames -> 0 windows, 47 frames -> 1 window of {} samples", win.len()))
}

/// Sends frames spaced by their timestamps, `speed` times faster than real time.
fn send_paced(sender: &Sender, frames: &[Frame], speed: f64) {
    let start = Instant::now();
    let t0 = frames.first().map_or(0, Frame::timestamp_100ns);
    for f in frames {
        let due = start + Duration::from_secs_f64((f.timestamp_100ns() - t0) as f64 / 1e7 / speed);
        if let Some(wait) = due.checked_duration_since(Instant::now()) {
            thread::sleep(wait);
        }
        sender.send_frame(f).unwrap();
    }
}

/// Mixed audio and video with a foreign metadata frame every two seconds.
fn mixed_input(seconds: f64) -> Vec<Frame> {
    let mut frames = sequence_frames(seconds, 25.0, 0);
    let mut k = 0;
    let mut i = 0;
    while i < frames.len() {
        if frames[i].timestamp_100ns() >= k * 20_000_000 {
            frames.insert(i, foreign_metadata(k * 20_000_000));
            k += 1;
            i += 1;
        }
        i += 1;
    }
    frames
}

struct Run {
    input: Vec<Frame>,
    direct: Vec<Received>,
    relayed: Vec<Received>,
    stats: RelayStats,
}

impl Run {
    fn passed_through(&self, relay_name: &str) -> Vec<&Received> {
        self.relayed.iter().filter(|r| !is_injected(&r.frame, relay_name)).collect()
    }

    fn injected(&self, relay_name: &str) -> usize {
        self.relayed.iter().filter(|r| is_injected(&r.frame, relay_name)).count()
    }

    fn check_bit_exact(&self, relay_name: &str) -> Result<(), String> {
        let want = encode_all(&self.input);
        let got = self.passed_through(relay_name);
        ensure(got.len() == want.len(), || format!("{} pass-through frames, sent {}", got.len(), want.len()))?;
        let a = digest(want.iter().map(|e| e.as_bytes()));
        let b = digest(got.iter().map(|r| r.encoded.as_bytes()));
        ensure(a == b, || format!("digest mismatch: sent {a}, received {b}"))
    }
}

/// Runs `input` through a loopback relay while `during` runs on the side.
fn relay_run(
    name: &str,
    mut cfg_fn: impl FnMut(&mut RelayConfig),
    input: Vec<Frame>,
    speed: f64,
    during: impl FnOnce(&tagstream::relay::RelayHandle) -> Result<(), String> + Send,
) -> Result<Run, String> {
    let sender = loopback_sender(&format!("{name}-src"));
    let mut cfg = loopback_relay_config(sender.local_addr(), name);
    cfg_fn(&mut cfg);
    let relay = start_relay(cfg).map_err(|e| e.to_string())?;
    let (direct, ready_a) = collect(sender.local_addr(), ReceiverConfig::default());
    let (relayed, ready_b) = collect(relay.output_addr(), ReceiverConfig::default());
    ready_a.recv().unwrap();
    ready_b.recv().unwrap();
    ensure(sender.wait_for_subscribers(2, Duration::from_secs(5)), || "relay never subscribed".into())?;
    ensure(wait_until(Duration::from_secs(2), || relay.subscriber_count() == 1), || "no relay subscriber".into())?;

    let n = input.len() as u64;
    let side = thread::scope(|s| {
        let feeder = s.spawn(|| send_paced(&sender, &input, speed));
        let side = during(&relay);
        feeder.join().unwrap();
        side
    });
    side?;
    relay
        .wait_for_stats(Duration::from_secs(20), |s| s.frames_passed.iter().sum::<u64>() == n)
        .ok_or("relay did not forward every frame")?;
    let stats = relay.stop();
    sender.close();
    Ok(Run { input, direct: direct.join().unwrap(), relayed: relayed.join().unwrap(), stats })
}

fn c2_pass_through() -> Check {
    let run = relay_run("c2-tags", |_| {}, mixed_input(10.0), 4.0, |_| Ok(()))?;
    run.check_bit_exact("c2-tags")?;
    let kinds = |k: FrameKind| run.input.iter().filter(|f| f.kind() == k).count();
    Ok(format!(
        "{} audio + {} video + {} foreign metadata frames byte- and order-identical; {} tag frames injected",
        kinds(FrameKind::Audio),
        kinds(FrameKind::Video),
        kinds(FrameKind::Metadata),
        run.injected("c2-tags")
    ))
}

/// Per-frame time from direct arrival to relayed arrival, in microseconds.
fn added_latency_us(run: &Run, relay_name: &str) -> Result<Vec<f64>, String> {
    let relayed = run.passed_through(relay_name);
    ensure(relayed.len() == run.direct.len(), || "relayed and direct streams differ in length".into())?;
    Ok(run
        .direct
        .iter()
        .zip(relayed)
        .map(|(d, r)| {
            if r.received_at >= d.received_at {
                (r.received_at - d.received_at).as_secs_f64() * 1e6
            } else {
                -((d.received_at - r.received_at).as_secs_f64() * 1e6)
            }
        })
        .collect())
}

fn c3_side_chain() -> Check {
    let side_chain = |name: &str, delay_ms: u64| -> Result<(f64, RelayStats), String> {
        let run = relay_run(
            name,
            |cfg| {
                cfg.window = WindowConfig::tumbling(8192);
                cfg.tagger = TaggerSpec::Sleep(Duration::from_millis(delay_ms));
                cfg.queue_depth = 4;
            },
            mixed_input(8.0),
            1.0,
            |_| Ok(()),
        )?;
        run.check_bit_exact(name)?;
        Ok((quantile(&added_latency_us(&run, name)?, 0.99), run.stats))
    };
    let (base_p99, base) = side_chain("c3-fast", 0)?;
    let (slow_p99, slow) = side_chain("c3-slow", 500)?;
    let diff = (slow_p99 - base_p99).abs();
    let detail = format!(
        "added p99 {base_p99:.0} us (0 ms tagger) vs {slow_p99:.0} us (500 ms tagger), diff {diff:.0} us; \
         internal p99 {} vs {} us; windows dropped {} vs {}",
        base.passthrough_latency_us.quantile(0.99),
        slow.passthrough_latency_us.quantile(0.99),
        base.windows_dropped,
        slow.windows_dropped
    );
    ensure(diff < 2000.0, || detail.clone())?;
    ensure(slow.windows_dropped > 0, || detail.clone())?;
    ensure(slow.windows_tagged + slow.windows_dropped + slow.tagger_failures == slow.windows_produced, || {
        format!("window accounting broken: {slow:?}")
    })?;
    Ok(detail)
}

fn medians(records: &[LatencyRecord]) -> Vec<(usize, f64)> {
    records.iter().map(|r| (r.buffer_samples, r.median_ms)).collect()
}

fn c4_bench_trend() -> Check {
    let plan = BenchPlan::default();
    let records = run_bench(&plan).map_err(|e| e.to_string())?;
    ensure(records.len() == 96, || format!("{} records", records.len()))?;
    let rho = size_latency_trend(&records).ok_or("no trend")?;
    ensure(rho > 0.9, || format!("spearman {rho:.4} <= 0.9"))?;

    let full =
        run_bench(&BenchPlan { tagger: TaggerSpec::Work(4), ..BenchPlan::default() }).map_err(|e| e.to_string())?;
    let half =
        run_bench(&BenchPlan { tagger: TaggerSpec::Work(2), ..BenchPlan::default() }).map_err(|e| e.to_string())?;
    let losses: Vec<String> = medians(&full)
        .iter()
        .zip(medians(&half))
        .filter(|((_, a), (_, b))| b >= a)
        .map(|((n, a), (_, b))| format!("{n}: half {b:.4} ms >= full {a:.4} ms"))
        .collect();
    ensure(losses.is_empty(), || losses.join("; "))?;
    let (first, last) = (&records[0], &records[records.len() - 1]);
    Ok(format!(
        "spearman {rho:.4}; median {:.3} ms @ {} .. {:.3} ms @ {}; half-work faster at all {} sizes",
        first.median_ms,
        first.buffer_samples,
        last.median_ms,
        last.buffer_samples,
        full.len()
    ))
}

fn random_frame(rng: &mut ChaCha8Rng) -> Frame {
    let ts = rng.gen::<u64>();
    match rng.gen_range(0..3) {
        0 => {
            let channels = rng.gen_range(1..=8);
            let n = rng.gen_range(1..=256u32);
            let samples = (0..channels * n)
                .map(|_| match rng.gen_range(0..10) {
                    0 => f32::from_bits(rng.gen::<u32>() & 0x807f_ffff), // subnormal or zero
                    1 => f32::MAX * if rng.gen() { 1.0 } else { -1.0 },
                    _ => rng.gen_range(-1.0..=1.0),
                })
                .collect();
            Frame::Audio(AudioFrame {
                timestamp_100ns: ts,
                sample_rate_hz: rng.gen_range(1..=384_000),
                channels,
                samples_per_channel: n,
                samples,
            })
        }
        1 => {
            let len = rng.gen_range(0..=2048);
            Frame::Video(VideoFrame {
                timestamp_100ns: ts,
                width: rng.gen(),
                height: rng.gen(),
                fourcc: rng.gen(),
                data: (0..len).map(|_| rng.gen()).collect(),
            })
        }
        _ => {
            let text: String = (0..rng.gen_range(0..64)).map(|_| random_char(rng)).collect();
            let escaped = text.replace('&', "&amp;").replace('<', "&lt;").replace('"', "&quot;");
            Frame::Metadata(MetadataFrame::new(ts, format!("<note text=\"{escaped}\">{}</note>", escaped)))
        }
    }
}

fn random_char(rng: &mut ChaCha8Rng) -> char {
    const POOL: &[char] = &['a', 'Z', '0', ' ', '&', '<', '>', '"', '\'', 'é', 'ß', '音', '🎵', '_', '-', '.'];
    POOL[rng.gen_range(0..POOL.len())]
}

fn c5_round_trips() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x7a65);
    for i in 0..1000 {
        let f = random_frame(&mut rng);
        let enc = encode_frame(&f).map_err(|e| format!("frame {i}: {e}"))?;
        let (back, raw, used) = decode_frame(enc.as_bytes()).map_err(|e| format!("frame {i}: {e}"))?;
        ensure(back == f && used == enc.len() && raw.as_bytes() == enc.as_bytes(), || format!("frame {i} changed"))?;
    }
    for i in 0..200 {
        let preds = (0..rng.gen_range(0..8))
            .map(|_| {
                let label: String =
                    std::iter::once('L').chain((0..rng.gen_range(0..12)).map(|_| random_char(&mut rng))).collect();
                TagPrediction::new(label, rng.gen_range(0.0..=1.0))
            })
            .collect();
        let result = TagResult {
            predictions: preds,
            window_start_timestamp_100ns: rng.gen(),
            window_samples: rng.gen_range(1..=1 << 20),
            sample_rate_hz: rng.gen_range(1..=384_000),
            inference_ms: rng.gen_range(0.0..5000.0),
        };
        let source: String = (0..rng.gen_range(0..16)).map(|_| random_char(&mut rng)).collect();
        let parsed =
            parse_metadata_xml(&build_metadata_xml(&result, &source)).map_err(|e| format!("result {i}: {e}"))?;
        let r = &parsed.result;
        let same = parsed.source_name == source
            && r.window_start_timestamp_100ns == result.window_start_timestamp_100ns
            && r.window_samples == result.window_samples
            && r.sample_rate_hz == result.sample_rate_hz
            && (r.inference_ms - result.inference_ms).abs() <= 1e-3
            && r.predictions.len() == result.predictions.len()
            && r.predictions
                .iter()
                .zip(&result.predictions)
                .all(|(a, b)| a.label == b.label && (a.score - b.score).abs() <= 1e-4);
        ensure(same, || format!("result {i}: {result:?} came back as {r:?}"))?;
    }
    Ok("1000 frames and 200 tag results survived the round trip".into())
}

fn c6_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0c6);
    let mut tagger = ReferenceSpectralTagger::default();
    let mut by_label = std::collections::BTreeMap::<&str, usize>::new();
    for i in 0..100 {
        let n = if rng.gen() { 2048 } else { 4096 };
        let x = match i % 5 {
            0 => sine(rng.gen_range(40.0..220.0), rng.gen_range(0.01..1.0), n, RATE),
            1 => sine(rng.gen_range(300.0..1800.0), rng.gen_range(0.01..1.0), n, RATE),
            2 => sine(rng.gen_range(2300.0..7500.0), rng.gen_range(0.01..1.0), n, RATE),
            3 => noise(rng.gen_range(0.05..1.0), n, rng.gen()),
            _ => sine(rng.gen_range(50.0..5000.0), rng.gen_range(0.0..5e-5), n, RATE),
        };
        let want = oracle_top_label(&x, RATE);
        let got = tagger.predict(&x, RATE).map_err(|e| e.to_string())?;
        ensure(got[0].label == want, || format!("window {i}: tagger {} vs oracle {want}", got[0].label))?;
        *by_label.entry(want).or_default() += 1;
    }
    Ok(format!("100/100 top labels match {by_label:?}"))
}

fn c7_discovery() -> Check {
    let cfg = DiscoveryConfig::default().with_port(free_udp_port()).loopback_only();
    let finder = Finder::bind(&cfg).map_err(|e| e.to_string())?;
    let ad = SourceAdvertisement::new("acceptance", "public", loopback(), 5961).map_err(|e| e.to_string())?;
    let started = Instant::now();
    let announcer = start_announcer(ad, &cfg).map_err(|e| e.to_string())?;
    finder.wait_for(cfg.announce_interval * 2, |s| !s.is_empty()).ok_or("not visible within 2 intervals")?;
    let seen = started.elapsed();
    announcer.stop();
    let stopped = Instant::now();
    finder.wait_for(cfg.ttl + cfg.announce_interval, |s| s.is_empty()).ok_or("still visible after ttl + interval")?;
    Ok(format!(
        "visible after {seen:.2?} (limit {:?}), gone {:.2?} after stop (limit {:?})",
        cfg.announce_interval * 2,
        stopped.elapsed(),
        cfg.ttl + cfg.announce_interval
    ))
}

fn c8_fault_containment() -> Check {
    let command = format!("exec {} serve-tagger", env!("CARGO_BIN_EXE_tagstream"));
    let mut detail = String::new();
    let run = relay_run(
        "c8-tags",
        |cfg| {
            cfg.window = WindowConfig::tumbling(8192);
            cfg.tagger = TaggerSpec::External(command.clone());
        },
        mixed_input(12.0),
        1.0,
        |relay| {
            let before = relay
                .wait_for_stats(Duration::from_secs(6), |s| s.metadata_emitted >= 3)
                .ok_or("external tagger never produced tags")?;
            let victims = child_pids("tagstream");
            ensure(victims.len() == 1, || format!("expected one tagger child, found {victims:?}"))?;
            let status = std::process::Command::new("kill").args(["-9", &victims[0].to_string()]).status();
            ensure(status.is_ok_and(|s| s.success()), || "kill -9 failed".into())?;
            let failed = relay
                .wait_for_stats(Duration::from_secs(5), |s| s.tagger_failures >= 1)
                .ok_or("killing the tagger went unnoticed")?;
            let resumed = relay
                .wait_for_stats(Duration::from_secs(5), |s| s.metadata_emitted >= failed.metadata_emitted + 3)
                .ok_or("tagging did not resume")?;
            let restarted = child_pids("tagstream");
            ensure(restarted.len() == 1 && restarted[0] != victims[0], || {
                format!("tagger children after restart: {restarted:?}")
            })?;
            detail = format!(
                "killed pid {} after {} tags; {} failed window(s); tags resumed ({} emitted) with pid {}",
                victims[0], before.metadata_emitted, failed.tagger_failures, resumed.metadata_emitted, restarted[0]
            );
            Ok(())
        },
    )?;
    run.check_bit_exact("c8-tags")?;
    Ok(format!("{detail}; all {} pass-through frames byte-identical", run.input.len()))
}

fn c9_conservation() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0c9);
    let mut windows_checked = 0;
    for case in 0..50 {
        let channels = rng.gen_range(1..=4u32);
        let window = rng.gen_range(1..5000usize);
        let mut w = Windower::new(WindowConfig::tumbling(window)).map_err(|e| e.to_string())?;
        let mut next = 0usize;
        let mut out = Vec::new();
        for _ in 0..rng.gen_range(1..80) {
            let n = rng.gen_range(1..3000usize);
            // Channel offsets sum to zero, so the channel mean is the index.
            let mut samples = vec![0f32; n * channels as usize];
            for c in 0..channels as usize {
                let offset = (c as f32 - (channels - 1) as f32 / 2.0) * 8.0;
                for i in 0..n {
                    samples[c * n + i] = (next + i) as f32 + offset;
                }
            }
            let f = AudioFrame {
                timestamp_100ns: samples_to_ticks(next as u64, RATE),
                sample_rate_hz: RATE,
                channels,
                samples_per_channel: n as u32,
                samples,
            };
            next += n;
            w.push_frame(&f).map_err(|e| e.to_string())?;
            while let Some(win) = w.try_take_window() {
                ensure(win.len() == window, || format!("case {case}: window of {}", win.len()))?;
                out.extend(win.samples);
                windows_checked += 1;
            }
        }
        ensure(w.windows_skipped() == 0, || format!("case {case}: windows skipped"))?;
        ensure(out.len() == next / window * window, || format!("case {case}: {} of {next} samples", out.len()))?;
        if let Some(i) = out.iter().enumerate().position(|(i, &x)| x != i as f32) {
            return Err(format!("case {case}: sample {i} is {} (channels {channels}, window {window})", out[i]));
        }
    }
    Ok(format!("50 random streams, {windows_checked} windows reproduce the downmixed input exactly"))
}
