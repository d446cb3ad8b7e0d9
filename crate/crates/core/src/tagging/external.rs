//! Out-of-process taggers speaking a line protocol over stdin/stdout.
//!
//! Request, written to the child's stdin:
//!
//! ```text
//! WIN <n> <rate>\n
//! <n little-endian f32 samples>
//! ```
//!
//! Reply, one line on the child's stdout:
//!
//! ```text
//! TAGS label:score,label:score,...\n
//! ```
//!
//! A neural model (for example a PANNs wrapper script) plugs in here. The
//! child is restarted on the next window after any failure.

use std::io::{self, BufRead, BufReader, Write};
use std::os::unix::process::CommandExt;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, SyncSender};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use super::{TagError, TagPrediction, Tagger};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(10);

pub fn encode_request(samples: &[f32], sample_rate_hz: u32) -> Vec<u8> {
    let mut out = format!("WIN {} {}\n", samples.len(), sample_rate_hz).into_bytes();
    out.reserve(samples.len() * 4);
    for s in samples {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}

/// Parses a `TAGS` reply. Scores outside `[0, 1]` are clamped with a warning.
pub fn parse_reply(line: &str) -> Result<Vec<TagPrediction>, String> {
    let line = line.trim_end_matches(['\n', '\r']);
    let body = match line.strip_prefix("TAGS") {
        Some("") => return Ok(Vec::new()),
        Some(rest) if rest.starts_with(' ') => rest.trim(),
        _ => return Err(format!("expected TAGS line, got {line:?}")),
    };
    if body.is_empty() {
        return Ok(Vec::new());
    }
    body.split(',')
        .map(|item| {
            let (label, score) =
                item.trim().rsplit_once(':').ok_or_else(|| format!("tag {item:?} is not label:score"))?;
            if label.is_empty() {
                return Err(format!("empty label in {item:?}"));
            }
            let score: f64 = score.parse().map_err(|_| format!("bad score in {item:?}"))?;
            if !score.is_finite() {
                return Err(format!("non-finite score in {item:?}"));
            }
            let clamped = score.clamp(0.0, 1.0);
            if clamped != score {
                log::warn!("external tagger score {score} for {label} clamped to {clamped}");
            }
            Ok(TagPrediction::new(label, clamped))
        })
        .collect()
}

pub fn format_reply(preds: &[TagPrediction]) -> String {
    let items: Vec<String> = preds.iter().map(|p| format!("{}:{:.6}", p.label, p.score)).collect();
    if items.is_empty() {
        "TAGS\n".into()
    } else {
        format!("TAGS {}\n", items.join(","))
    }
}

/// Runs the child side of the protocol: answers every request on `input`
/// with `tagger`'s predictions until end of input. Returns windows served.
pub fn serve<R: BufRead, W: Write>(mut input: R, mut output: W, tagger: &mut dyn Tagger) -> io::Result<u64> {
    let mut served = 0;
    let mut header = String::new();
    loop {
        header.clear();
        if input.read_line(&mut header)? == 0 {
            return Ok(served);
        }
        let mut parts = header.split_whitespace();
        let (n, rate) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
            (Some("WIN"), Some(n), Some(rate), None) => match (n.parse::<usize>(), rate.parse::<u32>()) {
                (Ok(n), Ok(rate)) => (n, rate),
                _ => return Err(io::Error::new(io::ErrorKind::InvalidData, format!("bad header {header:?}"))),
            },
            _ => return Err(io::Error::new(io::ErrorKind::InvalidData, format!("bad header {header:?}"))),
        };
        let mut raw = vec![0u8; n * 4];
        input.read_exact(&mut raw)?;
        let samples: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let reply = match tagger.predict(&samples, rate) {
            Ok(mut preds) => {
                super::rank_predictions(&mut preds);
                format_reply(&preds)
            }
            Err(e) => {
                log::warn!("tagger failed: {e}");
                format_reply(&[])
            }
        };
        output.write_all(reply.as_bytes())?;
        output.flush()?;
        served += 1;
    }
}

struct ChildLink {
    child: Child,
    requests: Option<SyncSender<Vec<u8>>>,
    replies: Receiver<io::Result<String>>,
    io: Option<JoinHandle<()>>,
}

impl ChildLink {
    fn spawn(command: &str) -> io::Result<Self> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .process_group(0)
            .spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (req_tx, req_rx) = mpsc::sync_channel::<Vec<u8>>(1);
        let (rep_tx, rep_rx) = mpsc::sync_channel(1);
        let io = thread::Builder::new()
            .name("external-tagger-io".into())
            .spawn(move || exchange_loop(stdin, stdout, req_rx, rep_tx))?;
        Ok(ChildLink { child, requests: Some(req_tx), replies: rep_rx, io: Some(io) })
    }

    fn pid(&self) -> u32 {
        self.child.id()
    }

    /// Kills the child's whole process group so no grandchild keeps the
    /// pipes open, then reaps it. The exchange thread is left to observe EOF.
    fn kill(&mut self) {
        self.requests.take();
        let pgid = self.child.id() as libc::pid_t;
        // SAFETY: plain syscall on a process group we created.
        unsafe {
            libc::kill(-pgid, libc::SIGKILL);
        }
        let _ = self.child.kill();
        let _ = self.child.wait();
        self.io.take();
    }
}

fn exchange_loop(
    mut stdin: ChildStdin,
    stdout: ChildStdout,
    requests: Receiver<Vec<u8>>,
    replies: SyncSender<io::Result<String>>,
) {
    let mut stdout = BufReader::new(stdout);
    while let Ok(req) = requests.recv() {
        let reply = stdin.write_all(&req).and_then(|_| stdin.flush()).and_then(|_| {
            let mut line = String::new();
            match stdout.read_line(&mut line)? {
                0 => Err(io::Error::new(io::ErrorKind::UnexpectedEof, "tagger closed its output")),
                _ => Ok(line),
            }
        });
        let failed = reply.is_err();
        if replies.send(reply).is_err() || failed {
            return;
        }
    }
}

/// [`Tagger`] backed by a child process started with `sh -c <command>`.
pub struct ExternalTagger {
    command: String,
    timeout: Duration,
    link: Option<ChildLink>,
    starts: u64,
    labels: Vec<String>,
}

impl ExternalTagger {
    pub fn new(command: impl Into<String>) -> Self {
        ExternalTagger { command: command.into(), timeout: DEFAULT_TIMEOUT, link: None, starts: 0, labels: Vec::new() }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    /// Declares the labels the child may emit; others are then rejected.
    pub fn with_labels(mut self, labels: Vec<String>) -> Self {
        self.labels = labels;
        self
    }

    pub fn command(&self) -> &str {
        &self.command
    }

    /// Number of times the child has been started.
    pub fn starts(&self) -> u64 {
        self.starts
    }

    pub fn child_pid(&self) -> Option<u32> {
        self.link.as_ref().map(ChildLink::pid)
    }

    fn fail(&mut self, why: String) -> TagError {
        if let Some(mut link) = self.link.take() {
            link.kill();
        }
        log::warn!("external tagger `{}` unavailable: {why}", self.command);
        TagError::TaggerUnavailable(why)
    }
}

impl Tagger for ExternalTagger {
    fn name(&self) -> &str {
        "external"
    }

    fn label_set(&self) -> &[String] {
        &self.labels
    }

    fn predict(&mut self, samples: &[f32], sample_rate_hz: u32) -> Result<Vec<TagPrediction>, TagError> {
        if self.link.is_none() {
            let link = ChildLink::spawn(&self.command)
                .map_err(|e| TagError::TaggerUnavailable(format!("spawn failed: {e}")))?;
            self.starts += 1;
            if self.starts > 1 {
                log::info!("external tagger restarted (pid {})", link.pid());
            }
            self.link = Some(link);
        }
        let link = self.link.as_mut().expect("link present");
        let sent =
            link.requests.as_ref().map(|tx| tx.send(encode_request(samples, sample_rate_hz)).is_ok()).unwrap_or(false);
        if !sent {
            return Err(self.fail("child exchange closed".into()));
        }
        match link.replies.recv_timeout(self.timeout) {
            Ok(Ok(line)) => parse_reply(&line).map_err(|e| self.fail(e)),
            Ok(Err(e)) => Err(self.fail(e.to_string())),
            Err(RecvTimeoutError::Timeout) => Err(self.fail(format!("no reply within {:?}", self.timeout))),
            Err(RecvTimeoutError::Disconnected) => Err(self.fail("child exchange closed".into())),
        }
    }
}

impl Drop for ExternalTagger {
    fn drop(&mut self) {
        if let Some(mut link) = self.link.take() {
            link.kill();
        }
    }
}
