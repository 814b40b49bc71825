use std::io::{Read, Write};
use std::process::{Command, Stdio};

use super::PackingError;

pub trait Tokenizer: Send + Sync {
    fn encode(&self, text: &str) -> Result<Vec<u32>, PackingError>;
}

/// One token per UTF-8 byte. Mostly useful for tests and dry runs.
#[derive(Debug, Clone, Copy, Default)]
pub struct ByteTokenizer;

impl Tokenizer for ByteTokenizer {
    fn encode(&self, text: &str) -> Result<Vec<u32>, PackingError> {
        Ok(text.bytes().map(u32::from).collect())
    }
}

/// Runs an external command per text: the text goes to stdin, a JSON array of
/// token ids is expected on stdout. The command line is run through `sh -c`.
#[derive(Debug, Clone)]
pub struct CommandTokenizer {
    command: String,
}

impl CommandTokenizer {
    pub fn new(command: impl Into<String>) -> Self {
        Self { command: command.into() }
    }
}

impl Tokenizer for CommandTokenizer {
    fn encode(&self, text: &str) -> Result<Vec<u32>, PackingError> {
        let fail = |m: String| PackingError::Tokenizer(format!("{}: {m}", self.command));
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(&self.command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| fail(e.to_string()))?;
        let mut stdin = child.stdin.take().unwrap();
        let input = text.to_string();
        let writer = std::thread::spawn(move || stdin.write_all(input.as_bytes()));
        let mut stdout = String::new();
        child
            .stdout
            .take()
            .unwrap()
            .read_to_string(&mut stdout)
            .map_err(|e| fail(e.to_string()))?;
        let status = child.wait().map_err(|e| fail(e.to_string()))?;
        writer
            .join()
            .expect("stdin writer panicked")
            .map_err(|e| fail(e.to_string()))?;
        if !status.success() {
            return Err(fail(format!("exited with {status}")));
        }
        serde_json::from_str(stdout.trim()).map_err(|e| fail(format!("bad output: {e}")))
    }
}
