use std::collections::{HashMap, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use super::{request_digest, ChatBackend, ChatMessage, VlmError};

/// File for the `occurrence`-th identical request: `{digest}.txt` first,
/// then `{digest}.{n}.txt` for repeats.
fn fixture_path(dir: &Path, digest: &str, occurrence: usize) -> PathBuf {
    if occurrence == 0 {
        dir.join(format!("{digest}.txt"))
    } else {
        dir.join(format!("{digest}.{occurrence}.txt"))
    }
}

fn next_occurrence(counter: &Mutex<HashMap<String, usize>>, digest: &str) -> usize {
    let mut seen = counter.lock().unwrap_or_else(|e| e.into_inner());
    let n = seen.entry(digest.to_string()).or_insert(0);
    let out = *n;
    *n += 1;
    out
}

/// Replays replies recorded under `fixtures/{sha256-of-request}.txt`.
/// A repeated identical request reads `{digest}.{n}.txt` when present and
/// falls back to the first recording otherwise.
pub struct FixtureClient {
    dir: PathBuf,
    seen: Mutex<HashMap<String, usize>>,
}

impl FixtureClient {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into(), seen: Mutex::new(HashMap::new()) }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

impl ChatBackend for FixtureClient {
    fn chat(&self, messages: &[ChatMessage], temperature: f64) -> Result<String, VlmError> {
        let digest = request_digest(messages, temperature);
        let n = next_occurrence(&self.seen, &digest);
        let path = fixture_path(&self.dir, &digest, n);
        let path = if path.exists() { path } else { fixture_path(&self.dir, &digest, 0) };
        std::fs::read_to_string(&path)
            .map_err(|_| VlmError::MissingFixture { digest, dir: self.dir.display().to_string() })
    }

    fn label(&self) -> String {
        "fixture".into()
    }
}

/// Forwards to `inner` and stores every reply as a fixture.
pub struct RecordingClient<B> {
    inner: B,
    dir: PathBuf,
    seen: Mutex<HashMap<String, usize>>,
}

impl<B: ChatBackend> RecordingClient<B> {
    pub fn new(inner: B, dir: impl Into<PathBuf>) -> Self {
        Self { inner, dir: dir.into(), seen: Mutex::new(HashMap::new()) }
    }
}

impl<B: ChatBackend> ChatBackend for RecordingClient<B> {
    fn chat(&self, messages: &[ChatMessage], temperature: f64) -> Result<String, VlmError> {
        let reply = self.inner.chat(messages, temperature)?;
        let digest = request_digest(messages, temperature);
        let n = next_occurrence(&self.seen, &digest);
        std::fs::create_dir_all(&self.dir)
            .and_then(|_| std::fs::write(fixture_path(&self.dir, &digest, n), &reply))
            .map_err(|e| VlmError::Config(format!("cannot write fixture: {e}")))?;
        Ok(reply)
    }

    fn label(&self) -> String {
        format!("recording:{}", self.inner.label())
    }
}

/// Returns queued replies in order, regardless of the request.
pub struct ScriptedClient {
    replies: Mutex<VecDeque<String>>,
    calls: Mutex<Vec<Vec<ChatMessage>>>,
}

impl ScriptedClient {
    pub fn new<I, S>(replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self { replies: Mutex::new(replies.into_iter().map(Into::into).collect()), calls: Mutex::new(Vec::new()) }
    }

    pub fn remaining(&self) -> usize {
        self.replies.lock().unwrap_or_else(|e| e.into_inner()).len()
    }

    /// Conversations received so far.
    pub fn calls(&self) -> Vec<Vec<ChatMessage>> {
        self.calls.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

impl ChatBackend for ScriptedClient {
    fn chat(&self, messages: &[ChatMessage], _temperature: f64) -> Result<String, VlmError> {
        self.calls.lock().unwrap_or_else(|e| e.into_inner()).push(messages.to_vec());
        self.replies
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .pop_front()
            .ok_or_else(|| VlmError::Transport("scripted replies exhausted".into()))
    }

    fn label(&self) -> String {
        "scripted".into()
    }
}
