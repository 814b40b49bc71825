use std::io::{Read, Write};
use std::process::{Command, Stdio};
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{canonicalize, CurationError, Sample, Verdict};

pub const REJECTION_STAGE: &str = "rejection";
pub const TIMEOUT_REASON: &str = "verifier-timeout";
pub const DEFAULT_VERIFIER_TIMEOUT_MS: u64 = 30_000;

/// Source of pass/fail judgements for instruction-response pairs.
pub trait Verifier: Send + Sync {
    fn verify(&self, sample: &Sample) -> Result<Verdict, CurationError>;
}

pub fn rejection_sample(sample: &Sample, verifier: &dyn Verifier) -> Result<Verdict, CurationError> {
    verifier.verify(sample)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum VerdictWord {
    Pass,
    Fail,
}

/// Wire format of external verifiers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct ExternalVerdict {
    verdict: VerdictWord,
    #[serde(default)]
    detail: String,
}

fn parse_external(id: &str, body: &str) -> Result<Verdict, CurationError> {
    let v: ExternalVerdict = serde_json::from_str(body.trim())
        .map_err(|e| CurationError::VerifierProtocol { id: id.to_string(), reason: format!("{e}: {body:?}") })?;
    Ok(match v.verdict {
        VerdictWord::Pass => Verdict::pass(REJECTION_STAGE).with_reason(v.detail),
        VerdictWord::Fail => Verdict::fail(REJECTION_STAGE, v.detail),
    })
}

/// Final answer of a response: the last `\boxed{...}` if any, else the last
/// non-empty line.
pub fn final_answer(response: &str) -> &str {
    if let Some(start) = response.rfind("\\boxed{") {
        let body = &response[start + "\\boxed{".len()..];
        let mut depth = 1;
        for (i, c) in body.char_indices() {
            match c {
                '{' => depth += 1,
                '}' => {
                    depth -= 1;
                    if depth == 0 {
                        return &body[..i];
                    }
                }
                _ => {}
            }
        }
    }
    response.lines().rev().map(str::trim).find(|l| !l.is_empty()).unwrap_or("")
}

pub fn normalize_answer(answer: &str) -> String {
    let c = canonicalize(answer);
    c.trim_end_matches('.').trim_matches('$').trim().to_string()
}

/// Compares the response's final answer with `expected_answer`. Samples
/// without an expected answer pass.
#[derive(Debug, Clone, Copy, Default)]
pub struct StubVerifier;

impl Verifier for StubVerifier {
    fn verify(&self, sample: &Sample) -> Result<Verdict, CurationError> {
        let Some(expected) = &sample.expected_answer else {
            return Ok(Verdict::pass(REJECTION_STAGE).with_reason("no-expected-answer"));
        };
        if normalize_answer(final_answer(&sample.response)) == normalize_answer(expected) {
            Ok(Verdict::pass(REJECTION_STAGE))
        } else {
            Ok(Verdict::fail(REJECTION_STAGE, "answer-mismatch"))
        }
    }
}

/// Runs `sh -c <command>` per sample with the record JSON on stdin and reads
/// one verdict object from stdout.
#[derive(Debug, Clone)]
pub struct CommandVerifier {
    pub command: String,
    pub timeout: Duration,
}

impl Verifier for CommandVerifier {
    fn verify(&self, sample: &Sample) -> Result<Verdict, CurationError> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(&self.command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()?;
        let payload = serde_json::to_vec(&sample.record).expect("records serialize");
        let mut stdin = child.stdin.take().expect("piped stdin");
        thread::spawn(move || {
            // the verifier may exit without reading
            let _ = stdin.write_all(&payload);
        });
        let mut stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            let mut out = String::new();
            let res = stdout.read_to_string(&mut out).map(|_| out);
            let _ = tx.send(res);
        });
        match rx.recv_timeout(self.timeout) {
            Ok(out) => {
                let out = out?;
                child.wait()?;
                parse_external(&sample.id, &out)
            }
            Err(_) => {
                let _ = child.kill();
                let _ = child.wait();
                Ok(Verdict::fail(REJECTION_STAGE, TIMEOUT_REASON))
            }
        }
    }
}

/// POSTs the record JSON to `url` and reads one verdict object back.
#[derive(Debug, Clone)]
pub struct HttpVerifier {
    pub url: String,
    agent: ureq::Agent,
}

impl HttpVerifier {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Self {
        Self { url: url.into(), agent: ureq::AgentBuilder::new().timeout(timeout).build() }
    }
}

fn is_timeout(e: &std::io::Error) -> bool {
    matches!(e.kind(), std::io::ErrorKind::TimedOut | std::io::ErrorKind::WouldBlock)
}

impl Verifier for HttpVerifier {
    fn verify(&self, sample: &Sample) -> Result<Verdict, CurationError> {
        let protocol = |reason: String| CurationError::VerifierProtocol { id: sample.id.clone(), reason };
        let body = serde_json::to_string(&sample.record).expect("records serialize");
        let resp = match self.agent.post(&self.url).set("Content-Type", "application/json").send_string(&body) {
            Ok(r) => r,
            Err(ureq::Error::Transport(t)) => {
                let timed_out = std::error::Error::source(&t)
                    .and_then(|s| s.downcast_ref::<std::io::Error>())
                    .is_some_and(is_timeout);
                if timed_out {
                    return Ok(Verdict::fail(REJECTION_STAGE, TIMEOUT_REASON));
                }
                return Err(protocol(t.to_string()));
            }
            Err(e) => return Err(protocol(e.to_string())),
        };
        match resp.into_string() {
            Ok(text) => parse_external(&sample.id, &text),
            Err(e) if is_timeout(&e) => Ok(Verdict::fail(REJECTION_STAGE, TIMEOUT_REASON)),
            Err(e) => Err(protocol(e.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VerifierConfig {
    Stub,
    Command {
        command: String,
        #[serde(default = "default_timeout")]
        timeout_ms: u64,
    },
    Http {
        url: String,
        #[serde(default = "default_timeout")]
        timeout_ms: u64,
    },
}

fn default_timeout() -> u64 {
    DEFAULT_VERIFIER_TIMEOUT_MS
}

impl Default for VerifierConfig {
    fn default() -> Self {
        VerifierConfig::Stub
    }
}

impl VerifierConfig {
    pub fn build(&self) -> Box<dyn Verifier> {
        match self {
            VerifierConfig::Stub => Box::new(StubVerifier),
            VerifierConfig::Command { command, timeout_ms } => Box::new(CommandVerifier {
                command: command.clone(),
                timeout: Duration::from_millis(*timeout_ms),
            }),
            VerifierConfig::Http { url, timeout_ms } => {
                Box::new(HttpVerifier::new(url.clone(), Duration::from_millis(*timeout_ms)))
            }
        }
    }
}
