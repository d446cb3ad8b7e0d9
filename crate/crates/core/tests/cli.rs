mod common;

use std::io::{BufRead, BufReader};
use std::net::TcpListener;
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

use common::*;

fn tagstream() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_tagstream"));
    for (k, _) in std::env::vars() {
        if k.starts_with("TSRM_") {
            c.env_remove(k);
        }
    }
    c
}

fn run(args: &[&str]) -> Output {
    tagstream().args(args).output().unwrap()
}

fn free_tcp_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

struct Reaped(Child);

impl Drop for Reaped {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn terminate(child: &mut Child) -> i32 {
    Command::new("kill").args(["-TERM", &child.id().to_string()]).status().unwrap();
    let deadline = Instant::now() + Duration::from_secs(10);
    loop {
        if let Some(s) = child.try_wait().unwrap() {
            return s.code().unwrap_or(-1);
        }
        assert!(Instant::now() < deadline, "child ignored SIGTERM");
        std::thread::sleep(Duration::from_millis(20));
    }
}

#[test]
fn every_help_exits_zero_and_lists_flags() {
    let cases: &[(&str, &[&str])] = &[
        ("", &["find", "send", "relay", "monitor", "bench"]),
        ("find", &["--timeout", "--discovery-port"]),
        ("send", &["--name", "--signal", "--wav", "--realtime"]),
        ("relay", &["--input", "--output-name", "--window-samples", "--tagger", "--queue-depth", "--stats-interval"]),
        ("monitor", &["--source", "--kinds", "--count"]),
        ("bench", &["--sizes", "--reps", "--tagger", "--out"]),
        ("serve-tagger", &["--tagger"]),
    ];
    for (cmd, flags) in cases {
        let mut args: Vec<&str> = if cmd.is_empty() { vec![] } else { vec![cmd] };
        args.push("--help");
        let o = run(&args);
        assert_eq!(o.status.code(), Some(0), "{cmd} --help");
        let text = String::from_utf8_lossy(&o.stdout);
        for f in *flags {
            assert!(text.contains(f), "{cmd} --help lacks {f}");
        }
    }
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = run(&["find", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"));
}

#[test]
fn find_on_empty_network_exits_2() {
    let port = free_udp_port().to_string();
    let t = Instant::now();
    let o = run(&["find", "--timeout", "0.5", "--discovery-port", &port]);
    assert_eq!(o.status.code(), Some(2));
    assert!(o.stdout.is_empty());
    assert!(t.elapsed() < Duration::from_secs(5));
}

#[test]
fn send_usage_and_runtime_errors() {
    let o = run(&["send", "--name", "x", "--wav", "/nonexistent/clip.wav"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("clip.wav"));
    let o = run(&["send", "--name", "x", "--wav", "a.wav", "--signal", "silence"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["send", "--signal", "silence"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["send", "--name", "x", "--signal", "square:5"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bench_rejects_zero_size_and_writes_csv() {
    assert_eq!(run(&["bench", "--sizes", "0"]).status.code(), Some(2));
    let o = run(&["bench", "--sizes", "1024,2048", "--reps", "2", "--warmup", "0"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("# tagger=reference"));
    assert!(lines[1].starts_with("# host="));
    assert_eq!(lines[2], "buffer_samples,window_seconds,mean_ms,median_ms,p95_ms,min_ms,max_ms");
    assert_eq!(lines.len(), 5);
    assert!(lines[3].starts_with("1024,0.0213333,"));
    assert!(lines[4].starts_with("2048,0.0426667,"));
}

#[test]
fn relay_on_busy_port_exits_1() {
    let taken = TcpListener::bind("0.0.0.0:0").unwrap();
    let port = taken.local_addr().unwrap().port().to_string();
    let disc = free_udp_port().to_string();
    let o = run(&["relay", "--input", "127.0.0.1:9", "--output-name", "r", "--port", &port, "--discovery-port", &disc]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn relay_with_same_input_and_output_is_usage_error() {
    let o = run(&["relay", "--input", "public/loop", "--output-name", "loop"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn empty_env_values_count_as_unset() {
    let o = tagstream()
        .args(["relay", "--output-name", "r"])
        .env("TSRM_INPUT", "")
        .env("TSRM_WINDOW_SAMPLES", "")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--input is required"), "{}", stderr(&o));
}

fn find_lines(disc: &str, timeout: &str) -> Vec<String> {
    let o = run(&["find", "--timeout", timeout, "--discovery-port", disc]);
    String::from_utf8_lossy(&o.stdout).lines().map(str::to_string).collect()
}

#[test]
fn flag_beats_env_beats_file() {
    let disc = free_udp_port().to_string();
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tsrm.conf");
    std::fs::write(&cfg, "# precedence\nname = from-file\ngroup=filegroup\n").unwrap();
    let send = |flag: Option<&str>, env: Option<&str>| {
        let mut c = tagstream();
        c.args(["send", "--signal", "silence", "--duration", "3", "--realtime", "--discovery-port", &disc])
            .args(["--announce-interval", "0.2"])
            .env("TSRM_CONFIG", &cfg)
            .stderr(Stdio::null());
        if let Some(f) = flag {
            c.args(["--name", f]);
        }
        if let Some(e) = env {
            c.env("TSRM_NAME", e);
        }
        Reaped(c.spawn().unwrap())
    };
    for (flag, env, want) in [
        (Some("from-flag"), Some("from-env"), "filegroup/from-flag"),
        (None, Some("from-env"), "filegroup/from-env"),
        (None, None, "filegroup/from-file"),
    ] {
        let child = send(flag, env);
        let lines = find_lines(&disc, "1");
        drop(child);
        assert_eq!(lines.len(), 1, "{lines:?}");
        assert!(lines[0].starts_with(&format!("{want} ")), "{lines:?}");
        // Let the previous announcement expire.
        std::thread::sleep(Duration::from_millis(1200));
    }
}

#[test]
fn find_lists_two_senders_sorted() {
    let disc = free_udp_port().to_string();
    let spawn = |name: &str| {
        Reaped(
            tagstream()
                .args(["send", "--name", name, "--signal", "silence", "--duration", "4", "--realtime"])
                .args(["--discovery-port", &disc, "--announce-interval", "0.2"])
                .stderr(Stdio::null())
                .spawn()
                .unwrap(),
        )
    };
    let _b = spawn("bravo");
    let _a = spawn("alpha");
    let lines = find_lines(&disc, "1");
    assert_eq!(lines.len(), 2, "{lines:?}");
    assert!(lines[0].starts_with("public/alpha "));
    assert!(lines[1].starts_with("public/bravo "));
}

fn spawn_pipeline(signal: &str, disc: &str, window: &str) -> (Reaped, Reaped, u16) {
    let src_port = free_tcp_port();
    let out_port = free_tcp_port();
    let relay = Reaped(
        tagstream()
            .args(["relay", "--input", &format!("127.0.0.1:{src_port}"), "--output-name", "tags"])
            .args(["--port", &out_port.to_string(), "--window-samples", window, "--stats-interval", "0.5"])
            .args(["--discovery-port", disc])
            .stderr(Stdio::piped())
            .spawn()
            .unwrap(),
    );
    let sender = Reaped(
        tagstream()
            .args(["send", "--name", "src", "--signal", signal, "--duration", "1", "--loop", "--realtime"])
            .args(["--port", &src_port.to_string(), "--discovery-port", disc])
            .stderr(Stdio::null())
            .spawn()
            .unwrap(),
    );
    (relay, sender, out_port)
}

#[test]
fn send_relay_monitor_silence() {
    let disc = free_udp_port().to_string();
    let (mut relay, _sender, out_port) = spawn_pipeline("silence", &disc, "8192");
    let o = tagstream()
        .args(["monitor", "--source", &format!("127.0.0.1:{out_port}"), "--count", "3", "--duration", "20"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3, "{text}");
    for l in &lines {
        assert!(l.starts_with("ts="), "{l}");
        assert!(l.contains(" src=tags "), "{l}");
        assert!(l.ends_with(" Silence:1.0000"), "{l}");
    }

    // The stats line is JSON on stderr, and SIGTERM is a clean exit.
    let mut err = BufReader::new(relay.0.stderr.take().unwrap());
    let mut line = String::new();
    let json = loop {
        line.clear();
        assert!(err.read_line(&mut line).unwrap() > 0, "relay stderr closed");
        if let Ok(v) = serde_json::from_str::<serde_json::Value>(line.trim()) {
            break v;
        }
    };
    assert!(json["frames_audio"].as_u64().unwrap() > 0);
    assert_eq!(terminate(&mut relay.0), 0);
}

#[test]
fn monitor_finds_relay_by_name_and_prints_tone() {
    let disc = free_udp_port().to_string();
    let (_relay, _sender, _) = spawn_pipeline("sine:3000:0.5", &disc, "4096");
    let o = tagstream()
        .args(["monitor", "--source", "public/tags", "--count", "2", "--duration", "20", "--discovery-port", &disc])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert!(text.lines().all(|l| l.contains(" ToneHigh:")), "{text}");
}

#[test]
fn config_file_option_must_exist() {
    let o = run(&["--config", Path::new("/nonexistent/tsrm.conf").to_str().unwrap(), "find"]);
    assert_eq!(o.status.code(), Some(2));
}
